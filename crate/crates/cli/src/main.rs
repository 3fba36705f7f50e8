use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use crave_core::clustering::{dynamic_cluster_analysis, parse_threshold_range};
use crave_core::eval::{load_dataset, run_batch};
use crave_core::model::{PipelineConfig, Post};
use crave_core::pipeline::Engine;
use crave_core::providers::{DiskCache, LiveSettings};
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "crave", version, about = "Check an image-and-text claim against retrieved evidence")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Verify one claim and print a verdict paragraph.
    Verify {
        #[arg(long)]
        text: String,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run a labeled JSONL dataset and write accuracy / F1 metrics.
    Batch {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Sweep agglomerative clustering thresholds over each post's evidence.
    ClusterReport {
        #[arg(long)]
        dataset: PathBuf,
        /// start:end:step, inclusive.
        #[arg(long, default_value = "0.5:0.95:0.05")]
        thresholds: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Inspect or empty the response cache in CRAVE_CACHE_DIR.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
        /// Cache directory; defaults to CRAVE_CACHE_DIR.
        #[arg(long, global = true)]
        dir: Option<PathBuf>,
    },
}

#[derive(Subcommand, Clone, Copy)]
enum CacheAction {
    Clear,
    Stats,
}

#[derive(Args)]
struct RunArgs {
    /// Replay from a fixture pack instead of calling live services.
    /// Repeat to search several packs in order.
    #[arg(long)]
    fixtures: Vec<PathBuf>,
    /// JSON file with pipeline settings; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    claim_rounds: Option<u32>,
    #[arg(long)]
    cluster_rounds: Option<u32>,
    #[arg(long)]
    visual_threshold: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    concurrency: Option<usize>,
    /// Treat fixture misses as empty results instead of failing.
    #[arg(long)]
    lenient: bool,
    /// Report the three-way verdict only, without binarizing.
    #[arg(long)]
    no_binary: bool,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome = Result<ExitCode, Failure>;

impl RunArgs {
    fn config(&self) -> Result<PipelineConfig, Failure> {
        let mut config = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| Failure::Usage(format!("invalid config {}: {e}", path.display())))?
            }
            None => PipelineConfig::default(),
        };
        if let Some(v) = self.clusters {
            config.num_clusters = v;
        }
        if let Some(v) = self.claim_rounds {
            config.claim_rounds = v;
        }
        if let Some(v) = self.cluster_rounds {
            config.cluster_rounds = v;
        }
        if let Some(v) = self.visual_threshold {
            config.visual_threshold = v;
        }
        if let Some(v) = self.seed {
            config.rng_seed = v;
        }
        if let Some(v) = self.concurrency {
            config.max_concurrency = v;
        }
        if self.lenient {
            config.strict_fixture_mode = false;
        }
        if self.no_binary {
            config.binary_mode = false;
        }
        config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        Ok(config)
    }

    fn engine(&self) -> Result<Engine, Failure> {
        let config = self.config()?;
        if !self.fixtures.is_empty() {
            let dirs: Vec<&Path> = self.fixtures.iter().map(PathBuf::as_path).collect();
            return Engine::replay_packs(&dirs, config)
                .context("cannot open fixture pack")
                .map_err(Failure::Runtime);
        }
        let settings = LiveSettings::from_env();
        let missing = settings.missing();
        if !missing.is_empty() {
            return Err(Failure::Usage(format!(
                "live mode needs {} (or pass --fixtures DIR to replay)",
                missing.join(", ")
            )));
        }
        Engine::live(settings, DiskCache::from_env(), config)
            .context("cannot start live providers")
            .map_err(Failure::Runtime)
    }
}

fn post_id(text: &str, image: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    hasher.update([0u8]);
    hasher.update(image);
    format!("post-{}", &hex::encode(hasher.finalize())[..12])
}

fn verify(text: &str, image: &Path, report: Option<&Path>, run: &RunArgs) -> Outcome {
    let bytes =
        fs::read(image).map_err(|e| Failure::Usage(format!("cannot read image {}: {e}", image.display())))?;
    if text.trim().is_empty() {
        return Err(Failure::Usage("--text must not be empty".into()));
    }
    let engine = run.engine()?;
    let post = Post::new(post_id(text, &bytes), text, image.to_string_lossy());
    let result = engine.run(post).context("verification failed")?;
    println!("{}", result.summary_paragraph());
    if let Some(path) = report {
        fs::write(path, result.to_json_pretty() + "\n")
            .with_context(|| format!("cannot write report {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn batch(dataset: &Path, out: &Path, run: &RunArgs) -> Outcome {
    let posts = load_dataset(dataset).map_err(|e| Failure::Usage(e.to_string()))?;
    let engine = run.engine()?;
    let summary = run_batch(&engine, &posts);
    let json = serde_json::to_string_pretty(&summary).context("cannot serialize metrics")?;
    fs::write(out, json + "\n").with_context(|| format!("cannot write {}", out.display()))?;
    print!("{}", summary.table());
    for failure in &summary.failures {
        eprintln!("post {} failed: {}", failure.post_id, failure.error);
    }
    Ok(if summary.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cluster_report(dataset: &Path, thresholds: &str, out: &Path, run: &RunArgs) -> Outcome {
    let thresholds = parse_threshold_range(thresholds).map_err(|e| Failure::Usage(format!("--thresholds: {e}")))?;
    let posts = load_dataset(dataset).map_err(|e| Failure::Usage(e.to_string()))?;
    let engine = run.engine()?;
    let mut sets = Vec::with_capacity(posts.len());
    for labeled in &posts {
        let set = engine
            .evidence_embeddings(labeled.post.clone())
            .with_context(|| format!("post {}", labeled.post.id))?;
        sets.push(set);
    }
    let sweep = dynamic_cluster_analysis(&sets, &thresholds).context("clustering sweep failed")?;
    let file = fs::File::create(out).with_context(|| format!("cannot create {}", out.display()))?;
    sweep.write_csv(std::io::BufWriter::new(file)).context("cannot write CSV")?;
    println!(
        "{} evidence sets swept over {} thresholds; peak entropy at threshold {:.2}",
        sweep.sets,
        sweep.rows.len(),
        sweep.peak_entropy_threshold
    );
    Ok(ExitCode::SUCCESS)
}

fn cache(action: CacheAction, dir: Option<PathBuf>) -> Outcome {
    let cache = match dir {
        Some(dir) => DiskCache::new(dir),
        None => DiskCache::from_env()
            .ok_or_else(|| Failure::Usage("set CRAVE_CACHE_DIR or pass --dir".into()))?,
    };
    match action {
        CacheAction::Stats => {
            let stats = cache.stats().map_err(|e| anyhow!(e))?;
            println!("{} entries, {} bytes", stats.entries, stats.bytes);
            for (provider, count) in &stats.per_provider {
                println!("  {provider}: {count}");
            }
        }
        CacheAction::Clear => {
            let removed = cache.clear().map_err(|e| anyhow!(e))?;
            println!("removed {removed} entries");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Verify { text, image, report, run } => verify(text, image, report.as_deref(), run),
        Command::Batch { dataset, out, run } => batch(dataset, out, run),
        Command::ClusterReport {
            dataset,
            thresholds,
            out,
            run,
        } => cluster_report(dataset, thresholds, out, run),
        Command::Cache { action, dir } => cache(*action, dir.clone()),
    };
    match outcome {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
