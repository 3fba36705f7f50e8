//! Scenario files and fixture pack recording.
//!
//! A scenario file describes one post and the scripted world it is checked
//! against. Recording runs the pipeline over the scripted backend and keeps
//! every provider exchange, producing a pack that replays the same run
//! offline. In scenario maps, the key `$claim` stands for the claim image.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::model::{PipelineConfig, Post};
use crate::pipeline::{Engine, PipelineError, VerdictReport};
use crate::providers::{sha256_hex, Backend, BlobStore, PackManifest, RecordingBackend, Scenario, ScriptedBackend};

pub const CLAIM_IMAGE_PLACEHOLDER: &str = "$claim";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioPost {
    pub id: String,
    pub claim_text: String,
    /// Claim image path, relative to the scenario file.
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub pack_id: String,
    #[serde(default)]
    pub description: String,
    pub post: ScenarioPost,
    pub scenario: Scenario,
}

/// A scenario ready to run: placeholders replaced, image bytes loaded.
#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub file: ScenarioFile,
    pub post: Post,
    pub image_path: PathBuf,
    pub image_bytes: Vec<u8>,
    pub scenario: Scenario,
}

impl LoadedScenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let setup = |e: String| PipelineError::Setup(format!("{}: {e}", path.display()));
        let text = std::fs::read_to_string(path).map_err(|e| setup(e.to_string()))?;
        let file: ScenarioFile = serde_json::from_str(&text).map_err(|e| setup(e.to_string()))?;
        let image_path = path.parent().unwrap_or(Path::new(".")).join(&file.post.image);
        let image_bytes = std::fs::read(&image_path).map_err(|e| setup(format!("{}: {e}", image_path.display())))?;
        let claim_ref = format!("sha256:{}", sha256_hex(&image_bytes));
        let mut scenario = file.scenario.clone();
        let swap = |key: String| if key == CLAIM_IMAGE_PLACEHOLDER { claim_ref.clone() } else { key };
        scenario.reverse_index = std::mem::take(&mut scenario.reverse_index)
            .into_iter()
            .map(|(k, v)| (swap(k), v))
            .collect();
        scenario.images = std::mem::take(&mut scenario.images)
            .into_iter()
            .map(|(k, v)| (swap(k), v))
            .collect();
        let post = Post::new(
            file.post.id.clone(),
            file.post.claim_text.clone(),
            image_path.to_string_lossy().into_owned(),
        );
        Ok(Self {
            file,
            post,
            image_path,
            image_bytes,
            scenario,
        })
    }

    fn blobs(&self) -> BlobStore {
        let blobs = BlobStore::new();
        blobs.insert(&self.image_bytes);
        blobs
    }

    /// Runs the post directly against the scripted world.
    pub fn run_scripted(&self, config: PipelineConfig) -> Result<VerdictReport, PipelineError> {
        Engine::scripted(self.scenario.clone(), self.blobs(), config)?.run(self.post.clone())
    }

    /// Runs the post over the scripted world, recording every exchange into
    /// `out_dir`, which should be empty or absent.
    pub fn record(&self, out_dir: &Path, config: PipelineConfig) -> Result<(PackManifest, VerdictReport), PipelineError> {
        let recorder = Arc::new(RecordingBackend::new(ScriptedBackend::new(self.scenario.clone()), out_dir));
        recorder.record_blob(&self.image_bytes)?;
        let backend: Arc<dyn Backend> = recorder.clone();
        let report = Engine::with_backend(backend, self.blobs(), config)?.run(self.post.clone())?;
        let manifest = recorder.finish(&self.file.pack_id, &self.file.description)?;
        Ok((manifest, report))
    }
}
