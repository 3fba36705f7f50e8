use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use super::fixtures::{load_records, write_record, FixtureRecord};
use super::{request_key, Backend, ProviderError, ProviderKind};

/// Content-addressed response cache on disk. Uses the fixture-pack record
/// layout, so a populated cache directory can be frozen into a pack.
#[derive(Debug, Clone)]
pub struct DiskCache {
    root: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub entries: usize,
    pub bytes: u64,
    pub per_provider: BTreeMap<String, usize>,
}

impl DiskCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// Cache rooted at `CRAVE_CACHE_DIR`, if set.
    pub fn from_env() -> Option<Self> {
        std::env::var_os("CRAVE_CACHE_DIR")
            .filter(|v| !v.is_empty())
            .map(|v| Self::new(PathBuf::from(v)))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, kind: ProviderKind, key: &str) -> PathBuf {
        self.root.join(kind.id()).join(format!("{key}.json"))
    }

    pub fn get(&self, kind: ProviderKind, key: &str) -> Option<Value> {
        let text = std::fs::read_to_string(self.path(kind, key)).ok()?;
        let record: FixtureRecord = serde_json::from_str(&text).ok()?;
        (record.key == key && record.kind == kind).then_some(record.response)
    }

    pub fn put(&self, record: &FixtureRecord) -> Result<(), ProviderError> {
        write_record(&self.root, record)
    }

    pub fn stats(&self) -> Result<CacheStats, ProviderError> {
        let mut stats = CacheStats::default();
        for kind in ProviderKind::ALL {
            let dir = self.root.join(kind.id());
            let records = load_records(&dir)?;
            if records.is_empty() {
                continue;
            }
            for record in &records {
                let meta = std::fs::metadata(dir.join(format!("{}.json", record.key)))
                    .map_err(|e| ProviderError::Storage(e.to_string()))?;
                stats.bytes += meta.len();
            }
            stats.entries += records.len();
            stats.per_provider.insert(kind.id().to_string(), records.len());
        }
        Ok(stats)
    }

    /// Removes every cached response. Returns how many were removed.
    pub fn clear(&self) -> Result<usize, ProviderError> {
        let removed = self.stats()?.entries;
        for kind in ProviderKind::ALL {
            let dir = self.root.join(kind.id());
            match std::fs::remove_dir_all(&dir) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(ProviderError::Storage(format!("{}: {e}", dir.display()))),
            }
        }
        Ok(removed)
    }
}

/// Serves repeated requests from a [`DiskCache`]; only successful responses
/// are stored.
pub struct CachedBackend<B> {
    inner: B,
    cache: DiskCache,
}

impl<B: Backend> CachedBackend<B> {
    pub fn new(inner: B, cache: DiskCache) -> Self {
        Self { inner, cache }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: Backend> Backend for CachedBackend<B> {
    fn call(&self, kind: ProviderKind, request: &Value) -> Result<Value, ProviderError> {
        let key = request_key(kind, request)?;
        if let Some(hit) = self.cache.get(kind, &key) {
            return Ok(hit);
        }
        let response = self.inner.call(kind, request)?;
        let record = FixtureRecord {
            kind,
            key,
            request: request.clone(),
            response: response.clone(),
        };
        if let Err(e) = self.cache.put(&record) {
            log::warn!("failed to cache {kind} response: {e}");
        }
        Ok(response)
    }
}
