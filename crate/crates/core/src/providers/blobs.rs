use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::ProviderError;

/// Content-addressed image bytes, held in memory or read from blob
/// directories (`<dir>/<sha256>`).
#[derive(Debug, Default)]
pub struct BlobStore {
    dirs: Vec<PathBuf>,
    memory: RwLock<HashMap<String, Arc<[u8]>>>,
}

/// An image reference after resolution: either content we hold, or a remote
/// URI the provider fetches itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResolvedImage {
    Content { sha256: String },
    Uri(String),
}

impl ResolvedImage {
    /// The provider request identifying this image.
    pub fn request_body(&self) -> Value {
        match self {
            ResolvedImage::Content { sha256 } => json!({ "image_sha256": sha256 }),
            ResolvedImage::Uri(uri) => json!({ "image_uri": uri }),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl BlobStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            dirs: vec![dir.into()],
            ..Self::default()
        }
    }

    pub fn add_dir(&mut self, dir: impl Into<PathBuf>) {
        self.dirs.push(dir.into());
    }

    /// Stores bytes in memory and returns their `sha256:` reference.
    pub fn insert(&self, bytes: &[u8]) -> String {
        let sha = sha256_hex(bytes);
        self.memory
            .write()
            .expect("blob store lock poisoned")
            .entry(sha.clone())
            .or_insert_with(|| Arc::from(bytes));
        format!("sha256:{sha}")
    }

    pub fn get(&self, sha256: &str) -> Option<Arc<[u8]>> {
        if let Some(bytes) = self.memory.read().expect("blob store lock poisoned").get(sha256) {
            return Some(bytes.clone());
        }
        if !is_hex_digest(sha256) {
            return None;
        }
        self.dirs
            .iter()
            .find_map(|dir| std::fs::read(dir.join(sha256)).ok())
            .map(Arc::from)
    }

    pub fn contains(&self, sha256: &str) -> bool {
        self.get(sha256).is_some()
    }

    /// Resolves `sha256:<hex>`, `http(s)://` URIs and local file paths.
    /// File contents are loaded into the store so later lookups by digest
    /// succeed.
    pub fn resolve(&self, image_ref: &str) -> Result<ResolvedImage, ProviderError> {
        let image_ref = image_ref.trim();
        let unresolvable = || ProviderError::ImageUnresolvable(image_ref.to_string());
        if image_ref.is_empty() {
            return Err(unresolvable());
        }
        if let Some(sha) = image_ref.strip_prefix("sha256:") {
            let sha = sha.to_ascii_lowercase();
            return if self.contains(&sha) {
                Ok(ResolvedImage::Content { sha256: sha })
            } else {
                Err(unresolvable())
            };
        }
        if image_ref.starts_with("http://") || image_ref.starts_with("https://") {
            return Ok(ResolvedImage::Uri(image_ref.to_string()));
        }
        let path = Path::new(image_ref.strip_prefix("file://").unwrap_or(image_ref));
        let bytes = std::fs::read(path).map_err(|_| unresolvable())?;
        let reference = self.insert(&bytes);
        Ok(ResolvedImage::Content {
            sha256: reference.trim_start_matches("sha256:").to_string(),
        })
    }
}

fn is_hex_digest(s: &str) -> bool {
    s.len() == 64 && s.chars().all(|c| c.is_ascii_hexdigit())
}
