//! Evidence gathering: reverse image search, LLM-assisted text search and
//! the bounded 5W1H refinement loops at claim and cluster scope.

use std::collections::{BTreeSet, HashMap};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::model::{EvidenceItem, EvidenceSet, FiveW1H, Origin, PipelineConfig, Post, Slot};
use crate::providers::{LlmOutput, LlmRequest, LlmTask, ProviderError, Providers, SearchResult};

const QUERY_INSTRUCTIONS: &str = "\
You write web search queries for fact-checking a social media claim.
Return short keyword queries built from the claim's named entities (people, organisations, places, dates, events).
If `missing_slots` is given, every query must target at least one of those 5W1H slots (who, what, when, where, why, how) \
by including the claim's entities for that slot, so the search can find evidence that confirms or contradicts them.
If `context` is given, it is a narrative found in earlier evidence; write queries that resolve inconsistencies between \
that narrative and the claim.
Return at most `max_queries` distinct queries.";

const EXTRACT_INSTRUCTIONS: &str = "\
Extract the named entities in the text and group them by 5W1H slot: who (people, organisations), what (events, actions, \
main topic), when (dates, times), where (locations), why (stated causes), how (means, objects involved).
Copy entity strings as they appear in the text. Use empty lists for slots with no entity. Do not infer entities that are \
not stated.";

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryList {
    queries: Vec<String>,
}

impl LlmOutput for QueryList {
    fn schema() -> Value {
        json!({
            "type": "object",
            "required": ["queries"],
            "additionalProperties": false,
            "properties": {"queries": {"type": "array", "minItems": 1, "items": {"type": "string"}}}
        })
    }

    fn validate(&self) -> Result<(), String> {
        if self.queries.iter().all(|q| q.trim().is_empty()) {
            return Err("no non-empty query".into());
        }
        Ok(())
    }
}

impl LlmOutput for FiveW1H {
    fn schema() -> Value {
        let list = json!({"type": "array", "items": {"type": "string"}});
        json!({
            "type": "object",
            "additionalProperties": false,
            "properties": {
                "who": list, "what": list, "when": list, "where": list, "why": list, "how": list
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round_index: u32,
    pub queries: Vec<String>,
    /// Ids of evidence first seen in this round.
    pub gained: Vec<String>,
    /// Claim slots still uncovered after this round.
    pub missing_slots: Vec<Slot>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTrace {
    /// `"claim"` or `"cluster-<k>"`.
    pub scope: String,
    /// Slots the narrative left uncovered before any refinement round
    /// (cluster scope only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub initial_missing_slots: Vec<Slot>,
    pub rounds: Vec<RoundTrace>,
    pub stopped_early: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
}

/// Slots where the claim names an entity that no evidence record mentions.
/// An evidence entity covers a claim entity when either contains the other.
pub fn find_missing_slots(claim: &FiveW1H, evidence: &[FiveW1H]) -> BTreeSet<Slot> {
    Slot::ALL
        .into_iter()
        .filter(|&slot| {
            let wanted = claim.slot(slot);
            !wanted.is_empty()
                && !evidence.iter().any(|record| {
                    record
                        .slot(slot)
                        .iter()
                        .any(|e| wanted.iter().any(|c| e.contains(c.as_str()) || c.contains(e.as_str())))
                })
        })
        .collect()
}

/// Runs provider calls for one pipeline run. Entity extraction results are
/// memoized per text.
pub struct Retriever<'a> {
    providers: &'a Providers,
    config: &'a PipelineConfig,
    pool: &'a rayon::ThreadPool,
    entities: Mutex<HashMap<String, FiveW1H>>,
}

impl<'a> Retriever<'a> {
    pub fn new(providers: &'a Providers, config: &'a PipelineConfig, pool: &'a rayon::ThreadPool) -> Self {
        Self {
            providers,
            config,
            pool,
            entities: Mutex::new(HashMap::new()),
        }
    }

    /// A provider error that must abort the whole run rather than degrade
    /// it: fixture misses in strict mode.
    pub fn is_fatal(&self, error: &ProviderError) -> bool {
        self.config.strict_fixture_mode && error.is_fixture_miss()
    }

    fn tolerate<T>(&self, result: Result<T, ProviderError>, errors: &mut Vec<String>) -> Result<Option<T>, ProviderError> {
        match result {
            Ok(value) => Ok(Some(value)),
            Err(e) if self.is_fatal(&e) => Err(e),
            Err(e) => {
                errors.push(e.to_string());
                Ok(None)
            }
        }
    }

    pub fn extract_5w1h(&self, text: &str) -> Result<FiveW1H, ProviderError> {
        let text = text.trim();
        if text.is_empty() {
            return Ok(FiveW1H::default());
        }
        if let Some(hit) = self.entities.lock().expect("entity cache poisoned").get(text) {
            return Ok(hit.clone());
        }
        let request = LlmRequest::new(
            LlmTask::Extract5w1h,
            EXTRACT_INSTRUCTIONS,
            json!({ "text": text }),
            FiveW1H::schema(),
        );
        let extracted = self.providers.llm_complete::<FiveW1H>(request)?.value.normalized();
        self.entities
            .lock()
            .expect("entity cache poisoned")
            .insert(text.to_string(), extracted.clone());
        Ok(extracted)
    }

    /// Entities for many texts at once; failed extractions count as empty
    /// unless fatal.
    fn extract_many(&self, texts: &[&str], errors: &mut Vec<String>) -> Result<Vec<FiveW1H>, ProviderError> {
        let results: Vec<Result<FiveW1H, ProviderError>> =
            self.pool.install(|| texts.par_iter().map(|t| self.extract_5w1h(t)).collect());
        results
            .into_iter()
            .map(|r| self.tolerate(r, errors).map(Option::unwrap_or_default))
            .collect()
    }

    /// One to `max_queries_per_round` distinct queries. With
    /// `missing_slots`, each query is made to mention at least one of the
    /// claim's entities for a missing slot.
    pub fn generate_queries(
        &self,
        claim_text: &str,
        missing_slots: Option<&BTreeSet<Slot>>,
        context: Option<&str>,
    ) -> Result<Vec<String>, ProviderError> {
        if claim_text.trim().is_empty() {
            return Err(ProviderError::InvalidRequest("empty claim text".into()));
        }
        let request = LlmRequest::new(
            LlmTask::GenerateQueries,
            QUERY_INSTRUCTIONS,
            json!({
                "claim": claim_text.trim(),
                "missing_slots": missing_slots.map(|s| s.iter().collect::<Vec<_>>()),
                "context": context.map(str::trim),
                "max_queries": self.config.max_queries_per_round,
            }),
            QueryList::schema(),
        );
        let raw = self.providers.llm_complete::<QueryList>(request)?.value.queries;
        let mut queries = dedup_queries(raw);
        if let Some(missing) = missing_slots.filter(|m| !m.is_empty()) {
            let claim = self.extract_5w1h(claim_text)?;
            let targets: Vec<&String> = missing.iter().flat_map(|s| claim.slot(*s)).collect();
            if !targets.is_empty() {
                queries = dedup_queries(
                    queries
                        .into_iter()
                        .map(|q| {
                            let lower = q.to_lowercase();
                            if targets.iter().any(|t| lower.contains(t.as_str())) {
                                q
                            } else {
                                let extra: Vec<&str> = targets.iter().map(|t| t.as_str()).collect();
                                format!("{q} {}", extra.join(" "))
                            }
                        })
                        .collect(),
                );
            }
        }
        queries.truncate(self.config.max_queries_per_round.max(1));
        Ok(queries)
    }

    fn search_round(
        &self,
        queries: &[String],
        errors: &mut Vec<String>,
    ) -> Result<Vec<SearchResult>, ProviderError> {
        let limit = self.config.results_per_query;
        let results: Vec<Result<Vec<SearchResult>, ProviderError>> = self
            .pool
            .install(|| queries.par_iter().map(|q| self.providers.text_search(q, limit)).collect());
        let mut out = Vec::new();
        for r in results {
            if let Some(found) = self.tolerate(r, errors)? {
                out.extend(found);
            }
        }
        Ok(out)
    }

    /// Reverse image search once, then up to `claim_rounds` text rounds,
    /// stopping as soon as every claim slot is covered by some evidence.
    /// Non-fatal provider failures end the affected step but keep whatever
    /// was already gathered.
    pub fn retrieve_evidence(&self, post: &Post) -> Result<(EvidenceSet, RetrievalTrace), ProviderError> {
        let mut evidence = EvidenceSet::new();
        let mut trace = RetrievalTrace {
            scope: "claim".into(),
            ..RetrievalTrace::default()
        };

        let reverse = self.providers.reverse_image_search(&post.image_ref);
        if let Some(results) = self.tolerate(reverse, &mut trace.errors)? {
            evidence.extend(
                results
                    .into_iter()
                    .enumerate()
                    .map(|(n, r)| to_item(format!("I{n}"), Origin::ReverseImage, 0, r)),
            );
        }

        let claim_slots = self
            .tolerate(self.extract_5w1h(&post.claim_text), &mut trace.errors)?
            .unwrap_or_default();
        let mut missing: Option<BTreeSet<Slot>> = None;
        let max_rounds = self.config.claim_rounds.max(1);
        for round in 1..=max_rounds {
            let mut round_trace = RoundTrace {
                round_index: round,
                queries: Vec::new(),
                gained: Vec::new(),
                missing_slots: Vec::new(),
                errors: Vec::new(),
            };
            let queries = match self.tolerate(
                self.generate_queries(&post.claim_text, missing.as_ref(), None),
                &mut round_trace.errors,
            )? {
                Some(q) => q,
                None => {
                    round_trace.missing_slots = missing.iter().flatten().copied().collect();
                    trace.rounds.push(round_trace);
                    break;
                }
            };
            let results = self.search_round(&queries, &mut round_trace.errors)?;
            let gained = evidence.extend(
                results
                    .into_iter()
                    .enumerate()
                    .map(|(n, r)| to_item(format!("T{round}.{n}"), Origin::TextSearch, round, r)),
            );
            round_trace.queries = queries;
            round_trace.gained = gained.iter().map(|i| i.id.clone()).collect();

            let texts: Vec<&str> = evidence.items().iter().map(|i| i.text.as_str()).collect();
            let evidence_slots = self.extract_many(&texts, &mut round_trace.errors)?;
            let now_missing = find_missing_slots(&claim_slots, &evidence_slots);
            round_trace.missing_slots = now_missing.iter().copied().collect();
            trace.rounds.push(round_trace);
            if now_missing.is_empty() {
                trace.stopped_early = round < max_rounds;
                break;
            }
            missing = Some(now_missing);
        }
        Ok((evidence, trace))
    }

    /// Targeted search for one cluster: up to `cluster_rounds` rounds of
    /// queries aimed at claim slots the narrative does not cover. Returned
    /// items are new with respect to `existing` and to each other.
    pub fn refine_cluster_evidence(
        &self,
        cluster_index: usize,
        narrative: &str,
        claim_text: &str,
        existing: &EvidenceSet,
    ) -> Result<(Vec<EvidenceItem>, RetrievalTrace), ProviderError> {
        let mut trace = RetrievalTrace {
            scope: format!("cluster-{cluster_index}"),
            ..RetrievalTrace::default()
        };
        if narrative.trim().is_empty() {
            trace.errors.push("empty narrative".into());
            return Ok((Vec::new(), trace));
        }
        let claim_slots = self
            .tolerate(self.extract_5w1h(claim_text), &mut trace.errors)?
            .unwrap_or_default();
        let mut known = vec![self
            .tolerate(self.extract_5w1h(narrative), &mut trace.errors)?
            .unwrap_or_default()];
        let mut missing = find_missing_slots(&claim_slots, &known);
        trace.initial_missing_slots = missing.iter().copied().collect();

        let mut seen = existing.clone();
        let mut gained_all = Vec::new();
        let max_rounds = self.config.cluster_rounds;
        for round in 1..=max_rounds {
            if missing.is_empty() {
                break;
            }
            let mut round_trace = RoundTrace {
                round_index: round,
                queries: Vec::new(),
                gained: Vec::new(),
                missing_slots: Vec::new(),
                errors: Vec::new(),
            };
            let Some(queries) = self.tolerate(
                self.generate_queries(claim_text, Some(&missing), Some(narrative)),
                &mut round_trace.errors,
            )?
            else {
                round_trace.missing_slots = missing.iter().copied().collect();
                trace.rounds.push(round_trace);
                break;
            };
            let results = self.search_round(&queries, &mut round_trace.errors)?;
            let gained = seen.extend(results.into_iter().enumerate().map(|(n, r)| {
                to_item(format!("K{cluster_index}.{round}.{n}"), Origin::TextSearch, round, r)
            }));
            let texts: Vec<&str> = gained.iter().map(|i| i.text.as_str()).collect();
            known.extend(self.extract_many(&texts, &mut round_trace.errors)?);
            missing = find_missing_slots(&claim_slots, &known);

            round_trace.queries = queries;
            round_trace.gained = gained.iter().map(|i| i.id.clone()).collect();
            round_trace.missing_slots = missing.iter().copied().collect();
            trace.rounds.push(round_trace);
            gained_all.extend(gained);
        }
        trace.stopped_early = missing.is_empty() && (trace.rounds.len() as u32) < max_rounds;
        Ok((gained_all, trace))
    }
}

fn dedup_queries(raw: Vec<String>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    raw.into_iter()
        .map(|q| q.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|q| !q.is_empty() && seen.insert(q.to_lowercase()))
        .collect()
}

fn to_item(id: String, origin: Origin, round: u32, result: SearchResult) -> EvidenceItem {
    EvidenceItem {
        id,
        origin,
        text: result.evidence_text(),
        image_ref: result.image_ref.clone().filter(|r| !r.trim().is_empty()),
        source_url: result.url,
        retrieved_round: round,
    }
}
