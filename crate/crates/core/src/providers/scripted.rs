//! A deterministic, network-free stand-in for every capability.
//!
//! The scripted world answers from a small document corpus and an entity
//! gazetteer: search is phrase matching over the corpus, the "LLM" does
//! gazetteer lookups and slot comparisons, text embeddings are feature
//! hashed and visual embeddings are synthesized per scene. It is used to
//! author replay fixture packs and to script retrieval behaviour in tests.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{
    Backend, LlmRequest, LlmTask, ProviderError, ProviderKind, FACE_DIM, PLACE_DIM, SEM_DIM, TEXT_EMBEDDING_DIM,
};
use crate::model::{FiveW1H, Slot};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub url: String,
    pub title: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

/// How to synthesize an image's visual embedding. Images of the same scene
/// are near-duplicates; `variation` controls how far each copy drifts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSpec {
    pub scene: String,
    #[serde(default = "default_variation")]
    pub variation: f64,
    #[serde(default)]
    pub face: bool,
}

fn default_variation() -> f64 {
    0.05
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    /// Entities the scripted LLM recognizes, by slot.
    pub gazetteer: FiveW1H,
    pub documents: Vec<Document>,
    /// Image reference to the URLs of documents that reverse search finds.
    pub reverse_index: BTreeMap<String, Vec<String>>,
    /// Image reference (`sha256:<hex>` or URI) to embedding recipe.
    pub images: BTreeMap<String, ImageSpec>,
}

pub struct ScriptedBackend {
    scenario: Scenario,
}

impl ScriptedBackend {
    pub fn new(scenario: Scenario) -> Self {
        Self { scenario }
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    /// Gazetteer entities mentioned in `text`.
    pub fn extract(&self, text: &str) -> FiveW1H {
        let lower = text.to_lowercase();
        let mut out = FiveW1H::default();
        for slot in Slot::ALL {
            for entity in self.scenario.gazetteer.slot(slot) {
                let entity = entity.trim().to_lowercase();
                if !entity.is_empty() && contains_phrase(&lower, &entity) {
                    out.slot_mut(slot).push(entity);
                }
            }
        }
        out.normalized()
    }

    fn search(&self, query: &str, limit: usize) -> Value {
        let tokens: Vec<String> = query.split_whitespace().map(str::to_lowercase).collect();
        let results: Vec<Value> = self
            .scenario
            .documents
            .iter()
            .filter(|doc| {
                let haystack = format!("{} {}", doc.title, doc.text).to_lowercase();
                !tokens.is_empty() && tokens.iter().all(|t| contains_phrase(&haystack, t))
            })
            .take(limit)
            .map(document_result)
            .collect();
        json!({ "results": results })
    }

    fn reverse(&self, image_key: &str) -> Value {
        let urls = self.scenario.reverse_index.get(image_key).cloned().unwrap_or_default();
        let results: Vec<Value> = urls
            .iter()
            .filter_map(|url| self.scenario.documents.iter().find(|d| &d.url == url))
            .map(document_result)
            .collect();
        json!({ "results": results })
    }

    fn embed_image(&self, image_key: &str) -> Result<Value, ProviderError> {
        let spec = self
            .scenario
            .images
            .get(image_key)
            .ok_or_else(|| ProviderError::DecodeFailure(format!("unknown scripted image {image_key}")))?;
        let component = |name: &str, dim: usize| -> Vec<f64> {
            let base = seeded_vector(&format!("scene:{}:{name}", spec.scene), dim);
            let noise = seeded_vector(&format!("image:{image_key}:{name}"), dim);
            base.iter().zip(&noise).map(|(b, n)| b + spec.variation * n).collect()
        };
        let face = spec.face.then(|| component("face", FACE_DIM));
        Ok(json!({
            "face": face,
            "place": component("place", PLACE_DIM),
            "sem": component("sem", SEM_DIM),
        }))
    }

    fn llm(&self, request: &Value) -> Result<Value, ProviderError> {
        let request: LlmRequest =
            serde_json::from_value(request.clone()).map_err(|e| ProviderError::InvalidRequest(e.to_string()))?;
        let input = &request.input;
        let text_of = |field: &str| input.get(field).and_then(Value::as_str).unwrap_or_default().to_string();
        let answer = match request.task {
            LlmTask::Extract5w1h => serde_json::to_value(self.extract(&text_of("text"))).expect("serializable"),
            LlmTask::GenerateQueries => {
                let missing: Option<Vec<Slot>> = input
                    .get("missing_slots")
                    .filter(|v| !v.is_null())
                    .map(|v| serde_json::from_value(v.clone()).unwrap_or_default());
                let max = input.get("max_queries").and_then(Value::as_u64).unwrap_or(3) as usize;
                json!({ "queries": self.queries(&text_of("claim"), missing.as_deref(), max) })
            }
            LlmTask::AssessCluster => self.assess(input),
            LlmTask::Explain => explain(input),
        };
        Ok(json!({ "content": answer.to_string() }))
    }

    fn queries(&self, claim: &str, missing: Option<&[Slot]>, max: usize) -> Vec<String> {
        let entities = self.extract(claim);
        let topic: Vec<String> = if entities.what.is_empty() {
            entities.who.clone()
        } else {
            entities.what.clone()
        };
        let mut queries: Vec<Vec<String>> = match missing {
            None => {
                let mut first = entities.who.clone();
                first.extend(entities.what.iter().cloned());
                let mut out = vec![first];
                if !entities.when.is_empty() {
                    out.push(topic.iter().chain(&entities.when).cloned().collect());
                }
                out
            }
            Some(slots) => slots
                .iter()
                .map(|slot| topic.iter().chain(entities.slot(*slot)).cloned().collect())
                .collect(),
        };
        queries.retain(|q| !q.is_empty());
        if queries.is_empty() {
            queries.push(claim.split_whitespace().take(8).map(str::to_lowercase).collect());
        }
        let mut out: Vec<String> = Vec::new();
        for q in queries.into_iter().map(|q| q.join(" ")) {
            if !out.contains(&q) {
                out.push(q);
            }
        }
        out.truncate(max.max(1));
        out
    }

    fn assess(&self, input: &Value) -> Value {
        let claim = self.extract(input.get("claim").and_then(Value::as_str).unwrap_or_default());
        let group = |field: &str| -> Option<(Value, Vec<String>)> {
            let texts: Vec<&str> = input.get(field)?.as_array()?.iter().filter_map(Value::as_str).collect();
            if texts.is_empty() {
                return None;
            }
            let mut evidence = FiveW1H::default();
            for text in texts {
                let found = self.extract(text);
                for slot in Slot::ALL {
                    evidence.slot_mut(slot).extend(found.slot(slot).iter().cloned());
                }
            }
            let mut notes = serde_json::Map::new();
            let mut mismatched = Vec::new();
            for (dimension, slot) in DIMENSION_SLOTS {
                let c = claim.slot(slot);
                let e = evidence.slot(slot);
                let note = if c.is_empty() || e.is_empty() {
                    "absent"
                } else if c.iter().any(|x| e.contains(x)) {
                    "match"
                } else {
                    mismatched.push(dimension.to_string());
                    "mismatch"
                };
                notes.insert(dimension.to_string(), json!(note));
            }
            Some((Value::Object(notes), mismatched))
        };
        let image = group("image_evidence");
        let text = group("text_evidence");
        let mut mismatched: Vec<String> = image
            .iter()
            .chain(text.iter())
            .flat_map(|(_, m)| m.iter().cloned())
            .collect();
        mismatched.dedup();
        let rationale = if mismatched.is_empty() {
            "No entity in the evidence contradicts the claim.".to_string()
        } else {
            format!("Evidence disagrees with the claim on: {}.", mismatched.join(", "))
        };
        json!({
            "image_evidence": image.map(|(notes, _)| notes),
            "text_evidence": text.map(|(notes, _)| notes),
            "rationale": rationale,
        })
    }
}

const DIMENSION_SLOTS: [(&str, Slot); 5] = [
    ("location", Slot::Where),
    ("named_person", Slot::Who),
    ("date", Slot::When),
    ("main_topic", Slot::What),
    ("common_objects", Slot::How),
];

fn explain(input: &Value) -> Value {
    let narratives = input.get("narratives").and_then(Value::as_array).cloned().unwrap_or_default();
    if narratives.is_empty() {
        return json!({
            "label": "not_enough_data",
            "explanation": "No evidence was available to assess the claim.",
        });
    }
    let supporting = |field: &str| {
        narratives
            .iter()
            .find(|n| n.get(field).and_then(Value::as_str) == Some("supports"))
    };
    let (label, explanation) = match supporting("image_alignment").or_else(|| supporting("text_alignment")) {
        Some(n) => (
            "true",
            format!(
                "The claim is corroborated by the narrative \"{}\", whose entities align with the claim.",
                n.get("narrative").and_then(Value::as_str).unwrap_or_default()
            ),
        ),
        None => {
            let first = &narratives[0];
            (
                "misleading",
                format!(
                    "No narrative supports the claim. The narrative \"{}\" conflicts with it: {}",
                    first.get("narrative").and_then(Value::as_str).unwrap_or_default(),
                    first.get("rationale").and_then(Value::as_str).unwrap_or_default()
                ),
            )
        }
    };
    json!({ "label": label, "explanation": explanation })
}

fn document_result(doc: &Document) -> Value {
    json!({
        "title": doc.title,
        "snippet": "",
        "page_text": doc.text,
        "url": doc.url,
        "image_ref": doc.image,
    })
}

impl Backend for ScriptedBackend {
    fn call(&self, kind: ProviderKind, request: &Value) -> Result<Value, ProviderError> {
        let image_key = || -> Result<String, ProviderError> {
            if let Some(sha) = request.get("image_sha256").and_then(Value::as_str) {
                return Ok(format!("sha256:{sha}"));
            }
            request
                .get("image_uri")
                .and_then(Value::as_str)
                .map(str::to_owned)
                .ok_or_else(|| ProviderError::InvalidRequest("image request without image".into()))
        };
        match kind {
            ProviderKind::Llm => self.llm(request),
            ProviderKind::TextSearch => {
                let query = request.get("query").and_then(Value::as_str).unwrap_or_default();
                let limit = request.get("limit").and_then(Value::as_u64).unwrap_or(10) as usize;
                Ok(self.search(query, limit))
            }
            ProviderKind::ReverseImage => Ok(self.reverse(&image_key()?)),
            ProviderKind::EmbedText => {
                let text = request.get("text").and_then(Value::as_str).unwrap_or_default();
                Ok(json!({ "embedding": hashing_embedding(text) }))
            }
            ProviderKind::EmbedImage => self.embed_image(&image_key()?),
        }
    }
}

/// True when `needle` occurs in `haystack` delimited by non-alphanumeric
/// characters on both sides.
fn contains_phrase(haystack: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    haystack.match_indices(needle).any(|(start, _)| {
        let before = haystack[..start].chars().next_back();
        let after = haystack[start + needle.len()..].chars().next();
        !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
    })
}

/// Signed feature-hashing bag-of-words embedding, L2-normalized.
pub fn hashing_embedding(text: &str) -> Vec<f64> {
    let mut vector = vec![0.0; TEXT_EMBEDDING_DIM];
    let lower = text.to_lowercase();
    for token in lower
        .split(|c: char| !(c.is_alphanumeric() || c == '-'))
        .filter(|t| !t.is_empty())
    {
        let digest = Sha256::digest(token.as_bytes());
        let bucket = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) as usize % TEXT_EMBEDDING_DIM;
        let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
        vector[bucket] += sign;
    }
    crate::numeric::l2_normalized(&vector).unwrap_or_else(|| {
        let mut unit = vec![0.0; TEXT_EMBEDDING_DIM];
        unit[0] = 1.0;
        unit
    })
}

fn seeded_vector(label: &str, dim: usize) -> Vec<f64> {
    let digest = Sha256::digest(label.as_bytes());
    let mut rng = ChaCha8Rng::from_seed(digest.into());
    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario() -> Scenario {
        Scenario {
            gazetteer: FiveW1H {
                who: vec!["pm modi".into()],
                what: vec!["visit".into()],
                when: vec!["3 may".into()],
                where_: vec!["paris".into()],
                ..Default::default()
            },
            documents: vec![
                Document {
                    url: "https://a.example/1".into(),
                    title: "PM Modi visit".into(),
                    text: "PM Modi visit to Paris on 3 May".into(),
                    image: None,
                },
                Document {
                    url: "https://a.example/2".into(),
                    title: "Other".into(),
                    text: "pm modi visit".into(),
                    image: None,
                },
            ],
            ..Default::default()
        }
    }

    #[test]
    fn extraction_uses_word_boundaries() {
        let backend = ScriptedBackend::new(scenario());
        let found = backend.extract("PM Modi visited Paris on 3 May");
        assert_eq!(found.who, vec!["pm modi"]);
        assert_eq!(found.where_, vec!["paris"]);
        assert_eq!(found.when, vec!["3 may"]);
        // "visited" does not contain the word "visit".
        assert!(found.what.is_empty());
        assert!(backend.extract("").is_empty());
    }

    #[test]
    fn search_requires_every_token() {
        let backend = ScriptedBackend::new(scenario());
        let all = backend.search("pm modi visit", 10);
        assert_eq!(all["results"].as_array().unwrap().len(), 2);
        let paris = backend.search("visit paris", 10);
        assert_eq!(paris["results"].as_array().unwrap().len(), 1);
        assert_eq!(backend.search("pm", 1)["results"].as_array().unwrap().len(), 1);
    }

    #[test]
    fn targeted_queries_mention_missing_slot_entities() {
        let backend = ScriptedBackend::new(scenario());
        let q = backend.queries("PM Modi visit to Paris on 3 May", Some(&[Slot::Where]), 3);
        assert_eq!(q, vec!["visit paris"]);
        let initial = backend.queries("PM Modi visit to Paris on 3 May", None, 3);
        assert_eq!(initial, vec!["pm modi visit", "visit 3 may"]);
    }

    #[test]
    fn hashing_embedding_is_unit_and_deterministic() {
        let a = hashing_embedding("IAF MiG-21 crash");
        assert_eq!(a, hashing_embedding("iaf mig-21 crash"));
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert_eq!(hashing_embedding("!!!").len(), TEXT_EMBEDDING_DIM);
    }

    #[test]
    fn phrase_matching() {
        assert!(contains_phrase("the mig-21 crashed", "mig-21"));
        assert!(!contains_phrase("visited", "visit"));
        assert!(contains_phrase("visit", "visit"));
    }
}
