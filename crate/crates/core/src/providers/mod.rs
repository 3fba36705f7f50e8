//! External capabilities behind one uniform request/response contract.
//!
//! Every capability (LLM completion, text search, reverse image search, text
//! embedding, visual embedding) is a [`Backend`] call taking a JSON request
//! and returning a JSON response body. The request is content-addressed with
//! [`canonical_key`](crate::model::canonical_key), which is what lets the
//! disk cache, the replay fixture packs and the recorder share one layout.
//! [`Providers`] is the typed facade the pipeline talks to.

mod blobs;
mod cache;
mod fixtures;
mod http;
mod live;
mod llm;
mod scripted;

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub use blobs::{sha256_hex, BlobStore, ResolvedImage};
pub use cache::{CacheStats, CachedBackend, DiskCache};
pub use fixtures::{FixturePack, FixtureRecord, PackManifest, RecordingBackend, ReplayBackend};
pub use http::{network_request_count, HttpRequest, HttpResponse, HttpTransport, Method, ReqwestTransport, TransportFailure};
pub use live::{LiveBackend, LiveSettings};
pub use llm::{LlmOutput, LlmRequest, LlmTask, Structured};
pub use scripted::{hashing_embedding, Document, ImageSpec, Scenario, ScriptedBackend};

use crate::model::{canonical_key, ModelError};

pub const TEXT_EMBEDDING_DIM: usize = 384;
pub const FACE_DIM: usize = 512;
pub const PLACE_DIM: usize = 2048;
pub const SEM_DIM: usize = 1000;

/// Identifies a capability. The id doubles as the fixture-pack subdirectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Llm,
    TextSearch,
    ReverseImage,
    EmbedText,
    EmbedImage,
}

impl ProviderKind {
    pub const ALL: [ProviderKind; 5] = [
        ProviderKind::Llm,
        ProviderKind::TextSearch,
        ProviderKind::ReverseImage,
        ProviderKind::EmbedText,
        ProviderKind::EmbedImage,
    ];

    pub fn id(self) -> &'static str {
        match self {
            ProviderKind::Llm => "llm",
            ProviderKind::TextSearch => "text_search",
            ProviderKind::ReverseImage => "reverse_image",
            ProviderKind::EmbedText => "embed_text",
            ProviderKind::EmbedImage => "embed_image",
        }
    }

    pub fn from_id(id: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.id() == id)
    }
}

impl fmt::Display for ProviderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("{kind} provider timed out")]
    Timeout { kind: ProviderKind },
    #[error("{kind} provider quota exhausted")]
    QuotaExhausted { kind: ProviderKind },
    #[error("no {kind} fixture recorded for key {key}")]
    FixtureMiss { kind: ProviderKind, key: String },
    #[error("LLM output for {task} violates its schema: {detail}")]
    SchemaViolation { task: String, detail: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("image reference cannot be resolved: {0}")]
    ImageUnresolvable(String),
    #[error("image could not be decoded: {0}")]
    DecodeFailure(String),
    #[error("{kind} provider returned a malformed response: {detail}")]
    MalformedResponse { kind: ProviderKind, detail: String },
    #[error("{kind} provider returned HTTP {status}")]
    Http { kind: ProviderKind, status: u16 },
    #[error("{kind} transport error: {detail}")]
    Transport { kind: ProviderKind, detail: String },
    #[error("{kind} provider is not configured: {detail}")]
    Unconfigured { kind: ProviderKind, detail: String },
    #[error("storage error: {0}")]
    Storage(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl ProviderError {
    /// Transient failures worth a second attempt with the same request.
    pub fn is_retryable(&self) -> bool {
        match self {
            ProviderError::Timeout { .. } | ProviderError::Transport { .. } => true,
            ProviderError::Http { status, .. } => *status >= 500,
            _ => false,
        }
    }

    pub fn is_fixture_miss(&self) -> bool {
        matches!(self, ProviderError::FixtureMiss { .. })
    }
}

/// A raw capability endpoint. Implementations must be pure functions of
/// `(kind, request)` when used for replay.
pub trait Backend: Send + Sync {
    fn call(&self, kind: ProviderKind, request: &Value) -> Result<Value, ProviderError>;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn call(&self, kind: ProviderKind, request: &Value) -> Result<Value, ProviderError> {
        (**self).call(kind, request)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn call(&self, kind: ProviderKind, request: &Value) -> Result<Value, ProviderError> {
        (**self).call(kind, request)
    }
}

/// Content address of a request for the given capability.
pub fn request_key(kind: ProviderKind, request: &Value) -> Result<String, ProviderError> {
    Ok(canonical_key(kind.id(), request)?)
}

/// Counts calls that reach the wrapped backend.
pub struct CountingBackend<B> {
    inner: B,
    calls: AtomicUsize,
}

impl<B: Backend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<B: Backend> Backend for CountingBackend<B> {
    fn call(&self, kind: ProviderKind, request: &Value) -> Result<Value, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.call(kind, request)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchResult {
    pub title: String,
    #[serde(default)]
    pub snippet: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub page_text: Option<String>,
    pub url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

impl SearchResult {
    /// Evidence text: title plus page text when scraped, title plus snippet
    /// otherwise.
    pub fn evidence_text(&self) -> String {
        let body = match self.page_text.as_deref() {
            Some(page) if !page.trim().is_empty() => page.trim(),
            _ => self.snippet.trim(),
        };
        [self.title.trim(), body]
            .into_iter()
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SearchResponse {
    results: Vec<SearchResult>,
}

/// Face, place and semantic descriptors of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawVisualEmbedding")]
pub struct VisualEmbedding {
    face: Option<Vec<f64>>,
    place: Vec<f64>,
    sem: Vec<f64>,
}

#[derive(Deserialize)]
struct RawVisualEmbedding {
    #[serde(default)]
    face: Option<Vec<f64>>,
    place: Vec<f64>,
    sem: Vec<f64>,
}

impl TryFrom<RawVisualEmbedding> for VisualEmbedding {
    type Error = String;

    fn try_from(raw: RawVisualEmbedding) -> Result<Self, Self::Error> {
        VisualEmbedding::new(raw.face, raw.place, raw.sem)
    }
}

impl VisualEmbedding {
    pub fn new(face: Option<Vec<f64>>, place: Vec<f64>, sem: Vec<f64>) -> Result<Self, String> {
        if let Some(f) = &face {
            if f.len() != FACE_DIM {
                return Err(format!("face vector has {} dims, expected {FACE_DIM}", f.len()));
            }
        }
        if place.len() != PLACE_DIM {
            return Err(format!("place vector has {} dims, expected {PLACE_DIM}", place.len()));
        }
        if sem.len() != SEM_DIM {
            return Err(format!("semantic vector has {} dims, expected {SEM_DIM}", sem.len()));
        }
        Ok(Self { face, place, sem })
    }

    pub fn face(&self) -> Option<&[f64]> {
        self.face.as_deref()
    }

    pub fn place(&self) -> &[f64] {
        &self.place
    }

    pub fn sem(&self) -> &[f64] {
        &self.sem
    }
}

/// Typed access to a backend, with request validation, image resolution and
/// response checking.
#[derive(Clone)]
pub struct Providers {
    backend: Arc<dyn Backend>,
    blobs: Arc<BlobStore>,
    strict: bool,
}

impl Providers {
    pub fn new(backend: Arc<dyn Backend>, blobs: Arc<BlobStore>, strict: bool) -> Self {
        Self { backend, blobs, strict }
    }

    pub fn blobs(&self) -> &Arc<BlobStore> {
        &self.blobs
    }

    pub fn is_strict(&self) -> bool {
        self.strict
    }

    /// Structured LLM completion. Output that fails to parse or validate is
    /// re-asked once with the error attached.
    pub fn llm_complete<T: LlmOutput>(&self, request: LlmRequest) -> Result<Structured<T>, ProviderError> {
        if request.instructions.trim().is_empty() {
            return Err(ProviderError::InvalidRequest("empty prompt".into()));
        }
        let first = self.llm_raw(&request)?;
        let problem = match llm::parse_output::<T>(&first) {
            Ok(value) => return Ok(Structured { value, retry_count: 0 }),
            Err(problem) => problem,
        };
        let repaired = request.with_repair(&first, &problem);
        let second = self.llm_raw(&repaired)?;
        llm::parse_output::<T>(&second)
            .map(|value| Structured { value, retry_count: 1 })
            .map_err(|detail| ProviderError::SchemaViolation {
                task: request.task.to_string(),
                detail,
            })
    }

    fn llm_raw(&self, request: &LlmRequest) -> Result<String, ProviderError> {
        let body = serde_json::to_value(request).map_err(|e| ModelError::UnserializableRequest(e.to_string()))?;
        let response = self.backend.call(ProviderKind::Llm, &body)?;
        response
            .get("content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| ProviderError::MalformedResponse {
                kind: ProviderKind::Llm,
                detail: "missing string field `content`".into(),
            })
    }

    pub fn text_search(&self, query: &str, limit: usize) -> Result<Vec<SearchResult>, ProviderError> {
        let query = query.trim();
        if query.is_empty() {
            return Err(ProviderError::InvalidRequest("empty search query".into()));
        }
        if limit == 0 {
            return Err(ProviderError::InvalidRequest("search limit must be at least 1".into()));
        }
        let request = json!({ "query": query, "limit": limit });
        let mut results = self.search_call(ProviderKind::TextSearch, &request)?;
        results.truncate(limit);
        Ok(results)
    }

    pub fn reverse_image_search(&self, image_ref: &str) -> Result<Vec<SearchResult>, ProviderError> {
        let image = self.blobs.resolve(image_ref)?;
        self.search_call(ProviderKind::ReverseImage, &image.request_body())
    }

    fn search_call(&self, kind: ProviderKind, request: &Value) -> Result<Vec<SearchResult>, ProviderError> {
        let response = match self.backend.call(kind, request) {
            Ok(response) => response,
            Err(e) if e.is_fixture_miss() && !self.strict => return Ok(Vec::new()),
            Err(e) => return Err(e),
        };
        let parsed: SearchResponse = serde_json::from_value(response).map_err(|e| ProviderError::MalformedResponse {
            kind,
            detail: e.to_string(),
        })?;
        Ok(parsed.results.into_iter().filter(|r| !r.url.trim().is_empty()).collect())
    }

    /// L2-normalized text embedding.
    pub fn embed_text(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        let text = text.trim();
        if text.is_empty() {
            return Err(ProviderError::InvalidRequest("cannot embed empty text".into()));
        }
        let response = self.backend.call(ProviderKind::EmbedText, &json!({ "text": text }))?;
        let malformed = |detail: String| ProviderError::MalformedResponse {
            kind: ProviderKind::EmbedText,
            detail,
        };
        let vector: Vec<f64> = response
            .get("embedding")
            .cloned()
            .ok_or_else(|| malformed("missing field `embedding`".into()))
            .and_then(|v| serde_json::from_value(v).map_err(|e| malformed(e.to_string())))?;
        if vector.len() != TEXT_EMBEDDING_DIM {
            return Err(malformed(format!(
                "embedding has {} dims, expected {TEXT_EMBEDDING_DIM}",
                vector.len()
            )));
        }
        crate::numeric::l2_normalized(&vector).ok_or_else(|| malformed("zero embedding vector".into()))
    }

    pub fn embed_image(&self, image_ref: &str) -> Result<VisualEmbedding, ProviderError> {
        let image = self.blobs.resolve(image_ref)?;
        let response = self.backend.call(ProviderKind::EmbedImage, &image.request_body())?;
        serde_json::from_value(response).map_err(|e| ProviderError::DecodeFailure(e.to_string()))
    }
}
