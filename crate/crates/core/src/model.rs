//! Domain types shared by every stage of the pipeline.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("claim text is empty")]
    EmptyClaimText,
    #[error("post has no image")]
    MissingImage,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("request cannot be serialized canonically: {0}")]
    UnserializableRequest(String),
}

/// The claim under verification: one image paired with one text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Post {
    pub id: String,
    pub claim_text: String,
    pub image_ref: String,
}

impl Post {
    pub fn new(id: impl Into<String>, claim_text: impl Into<String>, image_ref: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            claim_text: claim_text.into(),
            image_ref: image_ref.into(),
        }
    }
}

/// Checks that a post is usable as pipeline input. Returns it unchanged.
pub fn validate_post(post: Post) -> Result<Post, ModelError> {
    if post.claim_text.trim().is_empty() {
        return Err(ModelError::EmptyClaimText);
    }
    if post.image_ref.trim().is_empty() {
        return Err(ModelError::MissingImage);
    }
    Ok(post)
}

/// Which retrieval route produced an evidence item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    ReverseImage,
    TextSearch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub id: String,
    pub origin: Origin,
    pub text: String,
    pub image_ref: Option<String>,
    pub source_url: String,
    pub retrieved_round: u32,
}

impl EvidenceItem {
    pub fn has_image(&self) -> bool {
        self.image_ref.as_deref().is_some_and(|r| !r.trim().is_empty())
    }

    /// Dedup identity: the normalized source URL, or a digest of the
    /// normalized text when the item has no URL.
    pub fn canonical_identity(&self) -> String {
        let url = self.source_url.trim();
        if !url.is_empty() {
            return format!("url:{}", normalize_url(url));
        }
        let text = normalize_text(&self.text);
        if !text.is_empty() {
            return format!("text:{}", hex::encode(Sha256::digest(text.as_bytes())));
        }
        format!("image:{}", self.image_ref.as_deref().unwrap_or_default().trim())
    }

    /// The text used to embed the item for clustering. Falls back to the
    /// source URL when scraping produced no text.
    pub fn clustering_text(&self) -> &str {
        if self.text.trim().is_empty() {
            self.source_url.trim()
        } else {
            self.text.trim()
        }
    }
}

/// NFC-normalized, whitespace-trimmed text.
pub fn normalize_text(text: &str) -> String {
    text.trim().nfc().collect()
}

/// NFC-normalized URL with a lowercased host. Unparseable URLs are only
/// trimmed and NFC-normalized.
pub fn normalize_url(raw: &str) -> String {
    let trimmed: String = raw.trim().nfc().collect();
    match url::Url::parse(&trimmed) {
        Ok(mut parsed) => {
            if let Some(host) = parsed.host_str() {
                let lower = host.to_lowercase();
                if lower != host {
                    let _ = parsed.set_host(Some(&lower));
                }
            }
            parsed.to_string()
        }
        Err(_) => trimmed,
    }
}

/// Keeps the first item for each canonical identity, preserving order.
pub fn dedup_evidence(items: Vec<EvidenceItem>) -> Vec<EvidenceItem> {
    let mut seen = HashSet::new();
    items
        .into_iter()
        .filter(|item| seen.insert(item.canonical_identity()))
        .collect()
}

/// Ordered, duplicate-free evidence with origin partition counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "EvidenceSetRepr", into = "EvidenceSetRepr")]
pub struct EvidenceSet {
    items: Vec<EvidenceItem>,
    seen: HashSet<String>,
    n_image: usize,
    n_text: usize,
}

#[derive(Serialize, Deserialize)]
struct EvidenceSetRepr {
    n_image: usize,
    n_text: usize,
    items: Vec<EvidenceItem>,
}

impl From<EvidenceSetRepr> for EvidenceSet {
    fn from(repr: EvidenceSetRepr) -> Self {
        Self::from_items(repr.items)
    }
}

impl From<EvidenceSet> for EvidenceSetRepr {
    fn from(set: EvidenceSet) -> Self {
        Self {
            n_image: set.n_image,
            n_text: set.n_text,
            items: set.items,
        }
    }
}

impl EvidenceSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_items(items: impl IntoIterator<Item = EvidenceItem>) -> Self {
        let mut set = Self::new();
        set.extend(items);
        set
    }

    /// Adds the item unless an item with the same identity is present.
    pub fn insert(&mut self, item: EvidenceItem) -> bool {
        if !self.seen.insert(item.canonical_identity()) {
            return false;
        }
        match item.origin {
            Origin::ReverseImage => self.n_image += 1,
            Origin::TextSearch => self.n_text += 1,
        }
        self.items.push(item);
        true
    }

    /// Inserts every item, returning the ones that were actually new.
    pub fn extend(&mut self, items: impl IntoIterator<Item = EvidenceItem>) -> Vec<EvidenceItem> {
        items
            .into_iter()
            .filter(|item| self.insert(item.clone()))
            .collect()
    }

    pub fn contains(&self, item: &EvidenceItem) -> bool {
        self.seen.contains(&item.canonical_identity())
    }

    pub fn items(&self) -> &[EvidenceItem] {
        &self.items
    }

    pub fn get(&self, id: &str) -> Option<&EvidenceItem> {
        self.items.iter().find(|item| item.id == id)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.items.iter().position(|item| item.id == id)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn n_image(&self) -> usize {
        self.n_image
    }

    pub fn n_text(&self) -> usize {
        self.n_text
    }

    pub fn into_items(self) -> Vec<EvidenceItem> {
        self.items
    }
}

/// One of the six 5W1H entity slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Who,
    What,
    When,
    Where,
    Why,
    How,
}

impl Slot {
    pub const ALL: [Slot; 6] = [Slot::Who, Slot::What, Slot::When, Slot::Where, Slot::Why, Slot::How];

    pub fn as_str(self) -> &'static str {
        match self {
            Slot::Who => "who",
            Slot::What => "what",
            Slot::When => "when",
            Slot::Where => "where",
            Slot::Why => "why",
            Slot::How => "how",
        }
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Named entities grouped by 5W1H slot. Entity strings are lowercased,
/// trimmed and non-empty.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FiveW1H {
    #[serde(default)]
    pub who: Vec<String>,
    #[serde(default)]
    pub what: Vec<String>,
    #[serde(default)]
    pub when: Vec<String>,
    #[serde(rename = "where", default)]
    pub where_: Vec<String>,
    #[serde(default)]
    pub why: Vec<String>,
    #[serde(default)]
    pub how: Vec<String>,
}

impl FiveW1H {
    pub fn slot(&self, slot: Slot) -> &[String] {
        match slot {
            Slot::Who => &self.who,
            Slot::What => &self.what,
            Slot::When => &self.when,
            Slot::Where => &self.where_,
            Slot::Why => &self.why,
            Slot::How => &self.how,
        }
    }

    pub fn slot_mut(&mut self, slot: Slot) -> &mut Vec<String> {
        match slot {
            Slot::Who => &mut self.who,
            Slot::What => &mut self.what,
            Slot::When => &mut self.when,
            Slot::Where => &mut self.where_,
            Slot::Why => &mut self.why,
            Slot::How => &mut self.how,
        }
    }

    pub fn is_empty(&self) -> bool {
        Slot::ALL.iter().all(|s| self.slot(*s).is_empty())
    }

    /// Lowercases, trims and NFC-normalizes every entity, dropping empties
    /// and in-slot duplicates.
    pub fn normalized(mut self) -> Self {
        for slot in Slot::ALL {
            let entries = std::mem::take(self.slot_mut(slot));
            let mut seen = HashSet::new();
            *self.slot_mut(slot) = entries
                .into_iter()
                .map(|e| normalize_text(&e).to_lowercase())
                .filter(|e| !e.is_empty() && seen.insert(e.clone()))
                .collect();
        }
        self
    }
}

/// Tunables for one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Number of narrative clusters.
    pub num_clusters: usize,
    /// Maximum claim-level text search rounds.
    pub claim_rounds: u32,
    /// Maximum refinement rounds per cluster.
    pub cluster_rounds: u32,
    /// Composite visual similarity needed to keep an evidence image.
    pub visual_threshold: f64,
    pub max_queries_per_round: usize,
    pub results_per_query: usize,
    pub max_concurrency: usize,
    pub rng_seed: u64,
    pub strict_fixture_mode: bool,
    pub binary_mode: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            num_clusters: 4,
            claim_rounds: 3,
            cluster_rounds: 2,
            visual_threshold: 0.9,
            max_queries_per_round: 3,
            results_per_query: 10,
            max_concurrency: 4,
            rng_seed: 0,
            strict_fixture_mode: true,
            binary_mode: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: &str| Err(ModelError::InvalidConfig(msg.to_string()));
        if self.num_clusters < 1 {
            return fail("num_clusters must be at least 1");
        }
        if self.claim_rounds < 1 {
            return fail("claim_rounds must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.visual_threshold) {
            return fail("visual_threshold must lie in [0, 1]");
        }
        if self.max_queries_per_round < 1 {
            return fail("max_queries_per_round must be at least 1");
        }
        if self.results_per_query < 1 {
            return fail("results_per_query must be at least 1");
        }
        if self.max_concurrency < 1 {
            return fail("max_concurrency must be at least 1");
        }
        Ok(())
    }
}

/// Content address for a provider request: SHA-256 over the provider id, a
/// NUL separator and the request serialized with sorted object keys.
pub fn canonical_key<T: Serialize + ?Sized>(provider_id: &str, request: &T) -> Result<String, ModelError> {
    let value = serde_json::to_value(request).map_err(|e| ModelError::UnserializableRequest(e.to_string()))?;
    let mut hasher = Sha256::new();
    hasher.update(provider_id.as_bytes());
    hasher.update([0u8]);
    hasher.update(canonical_json(&value).as_bytes());
    Ok(hex::encode(hasher.finalize()))
}

/// Compact JSON with object keys in lexicographic order at every depth.
pub fn canonical_json(value: &serde_json::Value) -> String {
    use serde_json::Value;
    match value {
        Value::Object(map) => {
            let mut entries: Vec<_> = map.iter().collect();
            entries.sort_by(|a, b| a.0.cmp(b.0));
            let body: Vec<String> = entries
                .into_iter()
                .map(|(k, v)| format!("{}:{}", Value::String(k.clone()), canonical_json(v)))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(items) => {
            let body: Vec<String> = items.iter().map(canonical_json).collect();
            format!("[{}]", body.join(","))
        }
        other => other.to_string(),
    }
}
