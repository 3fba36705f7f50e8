//! The end-to-end run for one post and the report it produces.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{
    assign_refined, build_clusters, cluster_metrics, kmeans_with, select_narrative, Cluster, ClusterError,
    ClusterQualityReport, KMeansOptions,
};
use crate::judgment::{assess_cluster, judge, BinaryLabel, ExplanationSource, NarrativeAssessment, Verdict};
use crate::model::{validate_post, EvidenceItem, EvidenceSet, ModelError, PipelineConfig, Post};
use crate::providers::{
    Backend, BlobStore, CachedBackend, DiskCache, FixturePack, HttpTransport, LiveBackend, LiveSettings,
    ProviderError, Providers, ReplayBackend, ReqwestTransport, Scenario, ScriptedBackend,
};
use crate::retrieval::{RetrievalTrace, Retriever};
use crate::visual::{composite_similarity, filter_by_score, DropRecord};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("{0}")]
    Setup(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub index: usize,
    pub narrative: String,
    pub narrative_member_id: String,
    pub members_image: Vec<String>,
    pub members_text: Vec<String>,
    pub sources: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvidenceCounts {
    pub retrieved: usize,
    pub refined: usize,
    pub unembeddable: usize,
    pub dropped: usize,
    pub kept: usize,
    pub kept_image: usize,
    pub kept_text: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSummary {
    pub claim: RetrievalTrace,
    pub clusters: Vec<RetrievalTrace>,
}

/// Wall-clock data; the only part of a report that varies between
/// identical runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub started_at: String,
    pub total_ms: u64,
    pub stages_ms: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictReport {
    pub report_version: u32,
    pub post_id: String,
    pub claim_text: String,
    pub verdict: Verdict,
    pub binary_verdict: Option<BinaryLabel>,
    pub llm_label: Option<Verdict>,
    pub verdict_overridden: bool,
    pub explanation: String,
    pub explanation_source: ExplanationSource,
    pub decisive_cluster: Option<usize>,
    pub assessments: Vec<NarrativeAssessment>,
    pub clusters: Vec<ClusterSummary>,
    pub cluster_quality: ClusterQualityReport,
    pub evidence_counts: EvidenceCounts,
    pub evidence: Vec<EvidenceItem>,
    pub retrieval: RetrievalSummary,
    pub drop_log: Vec<DropRecord>,
    pub errors: Vec<String>,
    pub config: PipelineConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
}

impl VerdictReport {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }

    /// The report without timings: identical for identical runs.
    pub fn deterministic_json(&self) -> String {
        let mut copy = self.clone();
        copy.timings = None;
        copy.to_json_pretty()
    }

    /// One human-readable paragraph.
    pub fn summary_paragraph(&self) -> String {
        let binary = match self.binary_verdict {
            Some(b) if self.verdict == Verdict::NotEnoughData => format!(" (counted as {} in binary mode)", b.as_str()),
            _ => String::new(),
        };
        let text = format!(
            "Verdict: {}{binary}. {} Based on {} evidence item(s) in {} narrative cluster(s); {} item(s) dropped by the visual filter. \
This is decision support, not a final ruling.",
            self.verdict.display_name(),
            self.explanation,
            self.evidence_counts.kept,
            self.clusters.len(),
            self.evidence_counts.dropped,
        );
        text.split_whitespace().collect::<Vec<_>>().join(" ")
    }
}

/// Runs the verification pipeline over a provider set.
pub struct Engine {
    providers: Providers,
    config: PipelineConfig,
    pool: rayon::ThreadPool,
}

struct Stopwatch {
    start: Instant,
    stages: BTreeMap<String, u64>,
    last: Instant,
}

impl Stopwatch {
    fn new() -> Self {
        let now = Instant::now();
        Self {
            start: now,
            stages: BTreeMap::new(),
            last: now,
        }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.stages
            .insert(stage.to_string(), now.duration_since(self.last).as_millis() as u64);
        self.last = now;
    }
}

impl Engine {
    pub fn new(providers: Providers, config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.max_concurrency)
            .build()
            .map_err(|e| PipelineError::Setup(e.to_string()))?;
        Ok(Self { providers, config, pool })
    }

    pub fn with_backend(
        backend: Arc<dyn Backend>,
        blobs: BlobStore,
        config: PipelineConfig,
    ) -> Result<Self, PipelineError> {
        let strict = config.strict_fixture_mode;
        Self::new(Providers::new(backend, Arc::new(blobs), strict), config)
    }

    /// Offline engine answering only from a recorded fixture pack.
    pub fn replay(pack_dir: impl AsRef<Path>, config: PipelineConfig) -> Result<Self, PipelineError> {
        Self::replay_packs(&[pack_dir.as_ref()], config)
    }

    /// Offline engine over several packs; earlier packs take precedence.
    pub fn replay_packs(pack_dirs: &[&Path], config: PipelineConfig) -> Result<Self, PipelineError> {
        if pack_dirs.is_empty() {
            return Err(PipelineError::Setup("no fixture pack given".into()));
        }
        let packs = pack_dirs.iter().map(FixturePack::open).collect::<Result<Vec<_>, _>>()?;
        let backend = ReplayBackend::from_packs(packs);
        let blobs = backend.blob_store();
        Self::with_backend(Arc::new(backend), blobs, config)
    }

    pub fn scripted(scenario: Scenario, blobs: BlobStore, config: PipelineConfig) -> Result<Self, PipelineError> {
        Self::with_backend(Arc::new(ScriptedBackend::new(scenario)), blobs, config)
    }

    /// Engine over the real services, optionally behind a disk cache.
    pub fn live(settings: LiveSettings, cache: Option<DiskCache>, config: PipelineConfig) -> Result<Self, PipelineError> {
        let missing = settings.missing();
        if !missing.is_empty() {
            return Err(PipelineError::Setup(format!(
                "live mode needs these environment variables: {}",
                missing.join(", ")
            )));
        }
        let transport: Arc<dyn HttpTransport> = Arc::new(ReqwestTransport::new().map_err(PipelineError::Setup)?);
        let blobs = Arc::new(BlobStore::new());
        let live = LiveBackend::new(settings, transport, blobs.clone());
        let backend: Arc<dyn Backend> = match cache {
            Some(cache) => Arc::new(CachedBackend::new(live, cache)),
            None => Arc::new(live),
        };
        Self::new(Providers::new(backend, blobs, config.strict_fixture_mode), config)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn providers(&self) -> &Providers {
        &self.providers
    }

    fn fatal(&self, error: &ProviderError) -> bool {
        self.config.strict_fixture_mode && error.is_fixture_miss()
    }

    /// Embeds each item's clustering text; `None` marks a failed embedding.
    fn embed_items(&self, items: &[EvidenceItem], errors: &mut Vec<String>) -> Result<Vec<Option<Vec<f64>>>, PipelineError> {
        let results: Vec<Result<Vec<f64>, ProviderError>> = self.pool.install(|| {
            items
                .par_iter()
                .map(|item| self.providers.embed_text(item.clustering_text()))
                .collect()
        });
        let mut out = Vec::with_capacity(items.len());
        for (item, result) in items.iter().zip(results) {
            match result {
                Ok(v) => out.push(Some(v)),
                Err(e) if self.fatal(&e) => return Err(e.into()),
                Err(e) => {
                    errors.push(format!("text embedding failed for {}: {e}", item.id));
                    out.push(None);
                }
            }
        }
        Ok(out)
    }

    /// Retrieved evidence and its text embeddings, for clustering analysis.
    /// Items that cannot be embedded are left out.
    pub fn evidence_embeddings(&self, post: Post) -> Result<Vec<Vec<f64>>, PipelineError> {
        let post = validate_post(post)?;
        let retriever = Retriever::new(&self.providers, &self.config, &self.pool);
        let (evidence, _) = retriever.retrieve_evidence(&post)?;
        let mut errors = Vec::new();
        Ok(self.embed_items(evidence.items(), &mut errors)?.into_iter().flatten().collect())
    }

    pub fn run(&self, post: Post) -> Result<VerdictReport, PipelineError> {
        let started_at = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true);
        let mut clock = Stopwatch::new();
        let post = validate_post(post)?;
        let retriever = Retriever::new(&self.providers, &self.config, &self.pool);
        let mut errors = Vec::new();
        let mut counts = EvidenceCounts::default();

        let (retrieved, claim_trace) = retriever.retrieve_evidence(&post)?;
        counts.retrieved = retrieved.len();
        clock.lap("retrieval");

        // Only items with an embedding take part from here on.
        let embedded = self.embed_items(retrieved.items(), &mut errors)?;
        let mut evidence = EvidenceSet::new();
        let mut embeddings: HashMap<String, Vec<f64>> = HashMap::new();
        for (item, vector) in retrieved.items().iter().zip(embedded) {
            match vector {
                Some(v) => {
                    embeddings.insert(item.id.clone(), v);
                    evidence.insert(item.clone());
                }
                None => counts.unembeddable += 1,
            }
        }

        let mut clusters = Vec::new();
        let mut cluster_traces = Vec::new();
        let mut quality = ClusterQualityReport::default();
        if !evidence.is_empty() {
            let vectors: Vec<Vec<f64>> = evidence.items().iter().map(|i| embeddings[&i.id].clone()).collect();
            let result = kmeans_with(&vectors, &KMeansOptions::new(self.config.num_clusters, self.config.rng_seed))?;
            quality = cluster_metrics(&vectors, &result.assignment);
            clusters = build_clusters(evidence.items(), &vectors, &result)?;
            clock.lap("clustering");

            let centroids: Vec<Vec<f64>> = clusters.iter().map(|c| c.centroid.clone()).collect();
            for position in 0..clusters.len() {
                let (narrative, index) = (clusters[position].narrative.clone(), clusters[position].index);
                let (gained, trace) =
                    retriever.refine_cluster_evidence(index, &narrative, &post.claim_text, &evidence)?;
                cluster_traces.push(trace);
                let gained_vectors = self.embed_items(&gained, &mut errors)?;
                let mut joined = Vec::new();
                for (item, vector) in gained.into_iter().zip(gained_vectors) {
                    match vector {
                        Some(v) if evidence.insert(item.clone()) => {
                            embeddings.insert(item.id.clone(), v.clone());
                            joined.push((item, v));
                        }
                        Some(_) => {}
                        None => counts.unembeddable += 1,
                    }
                }
                counts.refined += joined.len();
                let vectors: Vec<Vec<f64>> = joined.iter().map(|(_, v)| v.clone()).collect();
                for ((item, _), target) in joined.iter().zip(assign_refined(&vectors, &centroids)) {
                    clusters[target].add_member(item);
                }
            }
            clock.lap("refinement");
        }

        let (kept, drop_log) = self.visual_filter(&post, &evidence, &mut errors)?;
        counts.dropped = drop_log.len();
        counts.kept = kept.len();
        counts.kept_image = kept.n_image();
        counts.kept_text = kept.n_text();
        let clusters = prune_clusters(clusters, &kept, &evidence, &embeddings);
        clock.lap("visual_filter");

        let assessments: Vec<Result<NarrativeAssessment, ProviderError>> = self.pool.install(|| {
            clusters
                .par_iter()
                .map(|c| assess_cluster(&self.providers, &post.claim_text, c, &kept))
                .collect()
        });
        let assessments = assessments.into_iter().collect::<Result<Vec<_>, _>>()?;
        clock.lap("assessment");

        let judgment = judge(&self.providers, &post, &assessments, kept.is_empty(), self.config.binary_mode)?;
        clock.lap("judgment");

        let summaries = clusters
            .iter()
            .map(|c| ClusterSummary {
                index: c.index,
                narrative: c.narrative.clone(),
                narrative_member_id: c.narrative_member_id.clone(),
                members_image: c.members_image.clone(),
                members_text: c.members_text.clone(),
                sources: c
                    .member_ids()
                    .filter_map(|id| kept.get(id))
                    .map(|i| i.source_url.clone())
                    .collect(),
            })
            .collect();
        for trace in std::iter::once(&claim_trace).chain(&cluster_traces) {
            errors.extend(trace.errors.iter().map(|e| format!("{}: {e}", trace.scope)));
            for round in &trace.rounds {
                errors.extend(
                    round
                        .errors
                        .iter()
                        .map(|e| format!("{} round {}: {e}", trace.scope, round.round_index)),
                );
            }
        }

        Ok(VerdictReport {
            report_version: REPORT_VERSION,
            post_id: post.id.clone(),
            claim_text: post.claim_text.clone(),
            verdict: judgment.verdict,
            binary_verdict: judgment.binary_verdict,
            llm_label: judgment.llm_label,
            verdict_overridden: judgment.verdict_overridden,
            explanation: judgment.explanation,
            explanation_source: judgment.explanation_source,
            decisive_cluster: judgment.decisive_cluster,
            assessments,
            clusters: summaries,
            cluster_quality: quality,
            evidence_counts: counts,
            evidence: evidence.into_items(),
            retrieval: RetrievalSummary {
                claim: claim_trace,
                clusters: cluster_traces,
            },
            drop_log,
            errors,
            config: self.config.clone(),
            timings: Some(Timings {
                started_at,
                total_ms: clock.start.elapsed().as_millis() as u64,
                stages_ms: clock.stages,
            }),
        })
    }

    /// Drops evidence whose image is visually unrelated to the claim image.
    /// Items that cannot be scored (no image, embedding failure) are kept;
    /// without a claim embedding nothing can be scored.
    fn visual_filter(
        &self,
        post: &Post,
        evidence: &EvidenceSet,
        errors: &mut Vec<String>,
    ) -> Result<(EvidenceSet, Vec<DropRecord>), PipelineError> {
        if evidence.is_empty() {
            return Ok((EvidenceSet::new(), Vec::new()));
        }
        let claim = match self.providers.embed_image(&post.image_ref) {
            Ok(e) => e,
            Err(e) if self.fatal(&e) => return Err(e.into()),
            Err(e) => {
                errors.push(format!("claim image embedding failed, visual filter skipped: {e}"));
                return Ok((evidence.clone(), Vec::new()));
            }
        };
        let scored: Vec<Result<Option<f64>, ProviderError>> = self.pool.install(|| {
            evidence
                .items()
                .par_iter()
                .map(|item| match item.image_ref.as_deref().filter(|_| item.has_image()) {
                    None => Ok(None),
                    Some(image) => self.providers.embed_image(image).map(|emb| {
                        composite_similarity(&claim, &emb).ok().map(|s| s.composite)
                    }),
                })
                .collect()
        });
        let mut pairs = Vec::with_capacity(evidence.len());
        for (item, score) in evidence.items().iter().zip(scored) {
            let score = match score {
                Ok(s) => s,
                Err(e) if self.fatal(&e) => return Err(e.into()),
                Err(e) => {
                    errors.push(format!("image embedding failed for {}, kept unvetted: {e}", item.id));
                    None
                }
            };
            pairs.push((item.clone(), score));
        }
        let outcome = filter_by_score(pairs, self.config.visual_threshold);
        Ok((EvidenceSet::from_items(outcome.kept), outcome.dropped))
    }
}

/// Restricts clusters to surviving evidence, drops clusters left empty and
/// re-picks a narrative whose member was filtered out.
fn prune_clusters(
    clusters: Vec<Cluster>,
    kept: &EvidenceSet,
    all: &EvidenceSet,
    embeddings: &HashMap<String, Vec<f64>>,
) -> Vec<Cluster> {
    clusters
        .into_iter()
        .filter_map(|mut cluster| {
            cluster.members_image.retain(|id| kept.get(id).is_some());
            cluster.members_text.retain(|id| kept.get(id).is_some());
            if cluster.is_empty() {
                return None;
            }
            if kept.get(&cluster.narrative_member_id).is_none() {
                let mut ids: Vec<&String> = cluster.member_ids().collect();
                ids.sort_by_key(|id| kept.position(id));
                let vectors: Vec<Vec<f64>> = ids.iter().map(|id| embeddings[*id].clone()).collect();
                let ordinals: Vec<usize> = (0..ids.len()).collect();
                let chosen = ids[select_narrative(&ordinals, &vectors, &cluster.centroid)].clone();
                cluster.narrative = all.get(&chosen).map(|i| i.clustering_text().to_string()).unwrap_or_default();
                cluster.narrative_member_id = chosen;
            }
            Some(cluster)
        })
        .collect()
}
