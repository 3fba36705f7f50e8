//! Replay fixture packs.
//!
//! Layout:
//!
//! ```text
//! <pack>/manifest.json
//! <pack>/<provider-id>/<canonical_key>.json
//! <pack>/blobs/<sha256>
//! ```

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{request_key, Backend, BlobStore, ProviderError, ProviderKind};

pub const PACK_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackManifest {
    pub pack_id: String,
    pub format_version: u32,
    #[serde(default)]
    pub description: String,
    /// Record count per provider id.
    #[serde(default)]
    pub providers: BTreeMap<String, usize>,
}

/// One recorded provider exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub kind: ProviderKind,
    pub key: String,
    pub request: Value,
    pub response: Value,
}

impl FixtureRecord {
    pub fn new(kind: ProviderKind, request: Value, response: Value) -> Result<Self, ProviderError> {
        Ok(Self {
            kind,
            key: request_key(kind, &request)?,
            request,
            response,
        })
    }

    pub fn to_pretty_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("fixture records always serialize");
        text.push('\n');
        text
    }
}

/// A loaded, validated fixture pack.
#[derive(Debug)]
pub struct FixturePack {
    root: PathBuf,
    manifest: PackManifest,
    records: HashMap<(ProviderKind, String), FixtureRecord>,
}

impl FixturePack {
    /// Loads every record, checking that each parses and is stored under
    /// the key its request hashes to.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, ProviderError> {
        let root = root.as_ref().to_path_buf();
        let manifest_path = root.join("manifest.json");
        let manifest: PackManifest = serde_json::from_str(&read(&manifest_path)?)
            .map_err(|e| storage(format!("{}: {e}", manifest_path.display())))?;
        if manifest.format_version != PACK_FORMAT_VERSION {
            return Err(storage(format!(
                "unsupported pack format version {}",
                manifest.format_version
            )));
        }
        let mut records = HashMap::new();
        for kind in ProviderKind::ALL {
            for record in load_records(&root.join(kind.id()))? {
                if record.kind != kind {
                    return Err(storage(format!("record {} filed under {kind}", record.key)));
                }
                let expected = request_key(kind, &record.request)?;
                if expected != record.key {
                    return Err(storage(format!(
                        "record {} does not match its request digest {expected}",
                        record.key
                    )));
                }
                if records.insert((kind, record.key.clone()), record).is_some() {
                    return Err(storage(format!("duplicate {kind} record")));
                }
            }
        }
        Ok(Self { root, manifest, records })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &PackManifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, kind: ProviderKind, key: &str) -> Option<&FixtureRecord> {
        self.records.get(&(kind, key.to_string()))
    }

    pub fn blob_dir(&self) -> PathBuf {
        self.root.join("blobs")
    }

    pub fn blob_store(&self) -> BlobStore {
        BlobStore::with_dir(self.blob_dir())
    }

    /// Writes `manifest.json` with per-provider record counts taken from
    /// the directory contents.
    pub fn write_manifest(root: &Path, pack_id: &str, description: &str) -> Result<PackManifest, ProviderError> {
        let mut providers = BTreeMap::new();
        for kind in ProviderKind::ALL {
            let count = load_records(&root.join(kind.id()))?.len();
            if count > 0 {
                providers.insert(kind.id().to_string(), count);
            }
        }
        let manifest = PackManifest {
            pack_id: pack_id.to_string(),
            format_version: PACK_FORMAT_VERSION,
            description: description.to_string(),
            providers,
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        write_atomic(&root.join("manifest.json"), text.as_bytes())?;
        Ok(manifest)
    }
}

pub(crate) fn load_records(dir: &Path) -> Result<Vec<FixtureRecord>, ProviderError> {
    let entries = match std::fs::read_dir(dir) {
        Ok(entries) => entries,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(storage(format!("{}: {e}", dir.display()))),
    };
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|path| {
            let record: FixtureRecord =
                serde_json::from_str(&read(&path)?).map_err(|e| storage(format!("{}: {e}", path.display())))?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            if stem != record.key {
                return Err(storage(format!("{} holds record {}", path.display(), record.key)));
            }
            Ok(record)
        })
        .collect()
}

fn read(path: &Path) -> Result<String, ProviderError> {
    std::fs::read_to_string(path).map_err(|e| storage(format!("{}: {e}", path.display())))
}

fn storage(msg: String) -> ProviderError {
    ProviderError::Storage(msg)
}

/// Writes through a temporary file in the same directory, then renames.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ProviderError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| storage(format!("{}: {e}", dir.display())))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| storage(e.to_string()))?;
    tmp.write_all(bytes).map_err(|e| storage(e.to_string()))?;
    tmp.persist(path).map_err(|e| storage(e.to_string()))?;
    Ok(())
}

pub(crate) fn write_record(root: &Path, record: &FixtureRecord) -> Result<(), ProviderError> {
    let path = root.join(record.kind.id()).join(format!("{}.json", record.key));
    write_atomic(&path, record.to_pretty_json().as_bytes())
}

/// Serves responses from one or more fixture packs, first pack first.
/// Never touches the network.
pub struct ReplayBackend {
    packs: Vec<FixturePack>,
}

impl ReplayBackend {
    pub fn new(pack: FixturePack) -> Self {
        Self { packs: vec![pack] }
    }

    pub fn from_packs(packs: Vec<FixturePack>) -> Self {
        Self { packs }
    }

    pub fn open(root: impl AsRef<Path>) -> Result<Self, ProviderError> {
        FixturePack::open(root).map(Self::new)
    }

    pub fn packs(&self) -> &[FixturePack] {
        &self.packs
    }

    /// A blob store over every pack's blob directory.
    pub fn blob_store(&self) -> BlobStore {
        let mut blobs = BlobStore::new();
        for pack in &self.packs {
            blobs.add_dir(pack.blob_dir());
        }
        blobs
    }
}

impl Backend for ReplayBackend {
    fn call(&self, kind: ProviderKind, request: &Value) -> Result<Value, ProviderError> {
        let key = request_key(kind, request)?;
        self.packs
            .iter()
            .find_map(|pack| pack.get(kind, &key))
            .map(|record| record.response.clone())
            .ok_or(ProviderError::FixtureMiss { kind, key })
    }
}

/// Passes calls through and records every successful exchange into a pack
/// directory.
pub struct RecordingBackend<B> {
    inner: B,
    root: PathBuf,
}

impl<B: Backend> RecordingBackend<B> {
    pub fn new(inner: B, root: impl Into<PathBuf>) -> Self {
        Self {
            inner,
            root: root.into(),
        }
    }

    /// Copies image bytes into the pack's blob directory.
    pub fn record_blob(&self, bytes: &[u8]) -> Result<String, ProviderError> {
        let sha = super::blobs::sha256_hex(bytes);
        write_atomic(&self.root.join("blobs").join(&sha), bytes)?;
        Ok(sha)
    }

    pub fn finish(&self, pack_id: &str, description: &str) -> Result<PackManifest, ProviderError> {
        FixturePack::write_manifest(&self.root, pack_id, description)
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn call(&self, kind: ProviderKind, request: &Value) -> Result<Value, ProviderError> {
        let response = self.inner.call(kind, request)?;
        let record = FixtureRecord::new(kind, request.clone(), response.clone())?;
        write_record(&self.root, &record)?;
        Ok(response)
    }
}
