mod common;

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use common::*;
use crave_core::model::{EvidenceSet, Origin, PipelineConfig, Post, Slot};
use crave_core::providers::{Backend, ProviderError, ProviderKind, ScriptedBackend};
use crave_core::retrieval::Retriever;
use serde_json::json;

const CLAIM_IMAGE: &str = "https://img.example/claim.jpg";

fn post() -> Post {
    Post::new("p", MODI_CLAIM, CLAIM_IMAGE)
}

fn scripted(scenario: crave_core::providers::Scenario) -> Arc<dyn Backend> {
    Arc::new(ScriptedBackend::new(scenario))
}

#[test]
fn extraction_of_a_simple_sentence() {
    let backend = scripted(crave_core::providers::Scenario {
        gazetteer: entities(&["pm modi"], &[], &["3 may"], &["paris"]),
        ..Default::default()
    });
    let (providers, config, pool) = (providers(backend, true), PipelineConfig::default(), pool(2));
    let retriever = Retriever::new(&providers, &config, &pool);
    let found = retriever.extract_5w1h("PM Modi visited Paris on 3 May").unwrap();
    assert_eq!(found, entities(&["pm modi"], &[], &["3 may"], &["paris"]));
    assert!(retriever.extract_5w1h("the weather was nice").unwrap().is_empty());
}

#[test]
fn empty_text_extracts_nothing_without_calling_the_llm() {
    let calls = Arc::new(AtomicUsize::new(0));
    let seen = calls.clone();
    let backend = Intercept::new(scripted(Default::default()), move |_, _| {
        seen.fetch_add(1, Ordering::SeqCst);
        None
    });
    let (providers, config, pool) = (providers(Arc::new(backend), true), PipelineConfig::default(), pool(1));
    let retriever = Retriever::new(&providers, &config, &pool);
    assert!(retriever.extract_5w1h("   ").unwrap().is_empty());
    assert_eq!(calls.load(Ordering::SeqCst), 0);
}

#[test]
fn duplicate_llm_queries_are_collapsed() {
    let backend = Intercept::new(scripted(where_in_round_two()), |kind, req| {
        (kind == ProviderKind::Llm && llm_task(req) == Some("generate_queries"))
            .then(|| Ok(json!({"content": r#"{"queries": ["modi visit", "Modi  visit", " ", "modi visit"]}"#})))
    });
    let (providers, config, pool) = (providers(Arc::new(backend), true), PipelineConfig::default(), pool(1));
    let retriever = Retriever::new(&providers, &config, &pool);
    assert_eq!(retriever.generate_queries(MODI_CLAIM, None, None).unwrap(), vec!["modi visit"]);
}

#[test]
fn targeted_queries_mention_the_missing_slot() {
    // An LLM that ignores the requested slot still yields queries naming it.
    let backend = Intercept::new(scripted(where_in_round_two()), |kind, req| {
        (kind == ProviderKind::Llm && llm_task(req) == Some("generate_queries"))
            .then(|| Ok(json!({"content": r#"{"queries": ["modi news", "state visit schedule"]}"#})))
    });
    let (providers, config, pool) = (providers(Arc::new(backend), true), PipelineConfig::default(), pool(1));
    let retriever = Retriever::new(&providers, &config, &pool);
    let missing = BTreeSet::from([Slot::Where]);
    let queries = retriever.generate_queries(MODI_CLAIM, Some(&missing), None).unwrap();
    assert_eq!(queries.len(), 2);
    assert!(queries.iter().all(|q| q.contains("paris")), "{queries:?}");
}

#[test]
fn query_count_is_capped() {
    let backend = Intercept::new(scripted(Default::default()), |kind, _| {
        (kind == ProviderKind::Llm).then(|| Ok(json!({"content": r#"{"queries": ["a", "b", "c", "d", "e"]}"#})))
    });
    let (providers, config, pool) = (providers(Arc::new(backend), true), PipelineConfig::default(), pool(1));
    let retriever = Retriever::new(&providers, &config, &pool);
    assert_eq!(retriever.generate_queries("anything", None, None).unwrap().len(), 3);
    assert!(retriever.generate_queries("  ", None, None).is_err());
}

#[test]
fn second_round_targets_the_uncovered_location() {
    let (providers, config, pool) = (providers(scripted(where_in_round_two()), true), PipelineConfig::default(), pool(2));
    let retriever = Retriever::new(&providers, &config, &pool);
    let (evidence, trace) = retriever.retrieve_evidence(&post()).unwrap();
    assert_eq!(trace.rounds.len(), 2);
    assert!(trace.stopped_early);
    assert_eq!(trace.rounds[0].missing_slots, vec![Slot::Where]);
    assert!(trace.rounds[1].missing_slots.is_empty());
    assert!(trace.rounds[1].queries.iter().all(|q| q.contains("paris")));
    assert_eq!(evidence.len(), 2);
    assert_eq!(evidence.items()[1].retrieved_round, 2);
}

#[test]
fn empty_world_gives_empty_evidence() {
    let (providers, config, pool) = (providers(scripted(Default::default()), true), PipelineConfig::default(), pool(2));
    let retriever = Retriever::new(&providers, &config, &pool);
    let (evidence, trace) = retriever.retrieve_evidence(&post()).unwrap();
    assert!(evidence.is_empty());
    assert_eq!(trace.rounds.len(), 1);
}

#[test]
fn failing_round_keeps_earlier_evidence() {
    let searches = Arc::new(AtomicUsize::new(0));
    let count = searches.clone();
    let backend = Intercept::new(scripted(where_in_round_two()), move |kind, _| {
        if kind != ProviderKind::TextSearch {
            return None;
        }
        (count.fetch_add(1, Ordering::SeqCst) >= 1).then_some(Err(ProviderError::Timeout { kind }))
    });
    let (providers, config, pool) = (providers(Arc::new(backend), true), PipelineConfig::default(), pool(1));
    let retriever = Retriever::new(&providers, &config, &pool);
    let (evidence, trace) = retriever.retrieve_evidence(&post()).unwrap();
    assert_eq!(evidence.len(), 1);
    assert!(trace.rounds.iter().any(|r| !r.errors.is_empty()));
    assert!(trace.rounds.len() <= 3);
}

#[test]
fn total_provider_failure_is_not_an_error() {
    let backend = Intercept::new(scripted(where_in_round_two()), |kind, _| Some(Err(ProviderError::Timeout { kind })));
    let (providers, config, pool) = (providers(Arc::new(backend), true), PipelineConfig::default(), pool(1));
    let retriever = Retriever::new(&providers, &config, &pool);
    let (evidence, trace) = retriever.retrieve_evidence(&post()).unwrap();
    assert!(evidence.is_empty());
    assert!(!trace.errors.is_empty());
}

#[test]
fn strict_fixture_miss_aborts() {
    let miss = |kind| Some(Err(ProviderError::FixtureMiss { kind, key: "k".into() }));
    let backend: Arc<dyn Backend> = Arc::new(Intercept::new(scripted(where_in_round_two()), move |k, _| miss(k)));
    let pool = pool(1);
    let strict_config = PipelineConfig::default();
    let strict = providers(backend.clone(), true);
    assert!(Retriever::new(&strict, &strict_config, &pool).retrieve_evidence(&post()).is_err());

    let lenient_config = PipelineConfig {
        strict_fixture_mode: false,
        ..PipelineConfig::default()
    };
    let lenient = providers(backend, false);
    let (evidence, _) = Retriever::new(&lenient, &lenient_config, &pool).retrieve_evidence(&post()).unwrap();
    assert!(evidence.is_empty());
}

#[test]
fn cluster_refinement_stops_when_narrative_covers_claim() {
    let (providers, config, pool) = (providers(scripted(where_in_round_two()), true), PipelineConfig::default(), pool(1));
    let retriever = Retriever::new(&providers, &config, &pool);
    let (gained, trace) = retriever
        .refine_cluster_evidence(0, "Modi state visit in Paris", MODI_CLAIM, &EvidenceSet::new())
        .unwrap();
    assert!(gained.is_empty());
    assert!(trace.rounds.is_empty());
    assert!(trace.stopped_early);
}

#[test]
fn cluster_refinement_finds_the_inconsistent_slot() {
    let (providers, config, pool) = (providers(scripted(where_in_round_two()), true), PipelineConfig::default(), pool(1));
    let retriever = Retriever::new(&providers, &config, &pool);
    let (gained, trace) = retriever
        .refine_cluster_evidence(2, "Modi began a state visit abroad.", MODI_CLAIM, &EvidenceSet::new())
        .unwrap();
    assert_eq!(trace.initial_missing_slots, vec![Slot::Where]);
    assert_eq!(trace.rounds.len(), 1);
    assert!(!gained.is_empty());
    assert!(gained.iter().all(|i| i.origin == Origin::TextSearch && i.retrieved_round >= 1));
    assert!(gained.iter().any(|i| i.source_url == "https://a.example/2"));
}

#[test]
fn cluster_refinement_excludes_existing_urls() {
    let (providers, config, pool) = (providers(scripted(where_in_round_two()), true), PipelineConfig::default(), pool(1));
    let retriever = Retriever::new(&providers, &config, &pool);
    let (first, _) = retriever
        .refine_cluster_evidence(0, "Modi began a state visit abroad.", MODI_CLAIM, &EvidenceSet::new())
        .unwrap();
    let existing = EvidenceSet::from_items(first);
    let (again, trace) = retriever
        .refine_cluster_evidence(0, "Modi began a state visit abroad.", MODI_CLAIM, &existing)
        .unwrap();
    assert!(again.is_empty());
    assert_eq!(trace.rounds.len(), 2);
    assert!(trace.rounds.iter().all(|r| r.gained.is_empty()));
}

#[test]
fn retrieval_is_deterministic() {
    let run = || {
        let (providers, config, pool) = (providers(scripted(where_in_round_two()), true), PipelineConfig::default(), pool(4));
        let retriever = Retriever::new(&providers, &config, &pool);
        retriever.retrieve_evidence(&post()).unwrap()
    };
    let (a, ta) = run();
    for _ in 0..3 {
        let (b, tb) = run();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
    }
}
