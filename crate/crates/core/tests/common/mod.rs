#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use crave_core::authoring::LoadedScenario;
use crave_core::model::{FiveW1H, PipelineConfig};
use crave_core::pipeline::Engine;
use crave_core::providers::{Backend, BlobStore, Document, ProviderError, ProviderKind, Providers, Scenario};
use serde_json::Value;

pub const SCENARIOS: [&str; 3] = ["true_claim", "ooc_iaf", "empty"];

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn pack_dir(name: &str) -> PathBuf {
    fixtures_dir().join("packs").join(name)
}

pub fn scenario(name: &str) -> LoadedScenario {
    LoadedScenario::load(fixtures_dir().join("scenarios").join(format!("{name}.json"))).expect("scenario loads")
}

pub fn replay_engine(name: &str, config: PipelineConfig) -> Engine {
    Engine::replay(pack_dir(name), config).expect("pack opens")
}

/// The `task` of an LLM request body.
pub fn llm_task(request: &Value) -> Option<&str> {
    request.get("task").and_then(Value::as_str)
}

type Hook = dyn Fn(ProviderKind, &Value) -> Option<Result<Value, ProviderError>> + Send + Sync;

/// Answers a call from `hook` when it returns `Some`, otherwise delegates.
pub struct Intercept {
    inner: Arc<dyn Backend>,
    hook: Box<Hook>,
}

impl Intercept {
    pub fn new(
        inner: Arc<dyn Backend>,
        hook: impl Fn(ProviderKind, &Value) -> Option<Result<Value, ProviderError>> + Send + Sync + 'static,
    ) -> Self {
        Self {
            inner,
            hook: Box::new(hook),
        }
    }
}

impl Backend for Intercept {
    fn call(&self, kind: ProviderKind, request: &Value) -> Result<Value, ProviderError> {
        match (self.hook)(kind, request) {
            Some(answer) => answer,
            None => self.inner.call(kind, request),
        }
    }
}

pub fn providers(backend: Arc<dyn Backend>, strict: bool) -> Providers {
    Providers::new(backend, Arc::new(BlobStore::new()), strict)
}

pub fn pool(threads: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap()
}

pub fn entities(who: &[&str], what: &[&str], when: &[&str], where_: &[&str]) -> FiveW1H {
    let own = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
    FiveW1H {
        who: own(who),
        what: own(what),
        when: own(when),
        where_: own(where_),
        ..Default::default()
    }
}

pub fn doc(url: &str, title: &str, text: &str) -> Document {
    Document {
        url: url.into(),
        title: title.into(),
        text: text.into(),
        image: None,
    }
}

/// Claim "Modi state visit to Paris": round 1 finds a report without the
/// location, round 2 (targeted at `where`) finds one naming Paris.
pub fn where_in_round_two() -> Scenario {
    Scenario {
        gazetteer: entities(&["modi"], &["state visit"], &[], &["paris"]),
        documents: vec![
            doc("https://a.example/1", "Modi begins state visit", "Modi began a state visit abroad."),
            doc("https://a.example/2", "State visit reaches Paris", "The state visit moved on to Paris."),
        ],
        ..Default::default()
    }
}

/// Same claim, but no document ever names the location.
pub fn where_never_found() -> Scenario {
    Scenario {
        gazetteer: entities(&["modi"], &["state visit"], &[], &["paris"]),
        documents: vec![doc(
            "https://a.example/1",
            "Modi begins state visit",
            "Modi began a state visit abroad.",
        )],
        ..Default::default()
    }
}

/// Every slot of the claim is covered by the first search round.
pub fn all_covered_in_round_one() -> Scenario {
    Scenario {
        gazetteer: entities(&["modi"], &["state visit"], &[], &["paris"]),
        documents: vec![doc(
            "https://a.example/1",
            "Modi state visit in Paris",
            "Modi began a state visit in Paris.",
        )],
        ..Default::default()
    }
}

pub const MODI_CLAIM: &str = "Modi state visit to Paris";
