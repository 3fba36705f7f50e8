//! Re-records the replay fixture packs from the scenario files.
//!
//! cargo run -p crave-core --example record_fixtures [SCENARIO.json ...]
//!
//! With no arguments every scenario under tests/fixtures/scenarios is
//! recorded into tests/fixtures/packs/<pack_id>, replacing the old pack.

use std::path::{Path, PathBuf};

use crave_core::authoring::LoadedScenario;
use crave_core::model::PipelineConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let mut scenarios: Vec<PathBuf> = std::env::args().skip(1).map(PathBuf::from).collect();
    if scenarios.is_empty() {
        scenarios = std::fs::read_dir(fixtures.join("scenarios"))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        scenarios.sort();
    }
    for path in scenarios {
        let loaded = LoadedScenario::load(&path)?;
        let out = fixtures.join("packs").join(&loaded.file.pack_id);
        if out.exists() {
            std::fs::remove_dir_all(&out)?;
        }
        let (manifest, report) = loaded.record(&out, PipelineConfig::default())?;
        let records: usize = manifest.providers.values().sum();
        println!(
            "{}: {} records, verdict {}",
            manifest.pack_id,
            records,
            report.verdict.as_str()
        );
    }
    Ok(())
}
