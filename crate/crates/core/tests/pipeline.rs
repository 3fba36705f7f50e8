mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use common::*;
use crave_core::judgment::{AlignmentLabel, BinaryLabel, ExplanationSource, Verdict, ASSESSMENT_FAILED};
use crave_core::model::PipelineConfig;
use crave_core::pipeline::{Engine, PipelineError};
use crave_core::providers::{Backend, BlobStore, ProviderError, ProviderKind, ReplayBackend};
use serde_json::json;

fn replay_backend(name: &str) -> Arc<dyn Backend> {
    Arc::new(ReplayBackend::open(pack_dir(name)).unwrap())
}

fn intercepted_engine(
    name: &str,
    hook: impl Fn(ProviderKind, &serde_json::Value) -> Option<Result<serde_json::Value, ProviderError>>
        + Send
        + Sync
        + 'static,
) -> Engine {
    let backend = Arc::new(Intercept::new(replay_backend(name), hook));
    Engine::with_backend(backend, BlobStore::new(), PipelineConfig::default()).unwrap()
}

fn files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn shipped_packs_match_their_scenarios() {
    for name in SCENARIOS {
        let dir = tempfile::tempdir().unwrap();
        scenario(name).record(dir.path(), PipelineConfig::default()).unwrap();
        let fresh = files(dir.path());
        let shipped = files(&pack_dir(name));
        assert_eq!(
            fresh.keys().collect::<Vec<_>>(),
            shipped.keys().collect::<Vec<_>>(),
            "{name}: re-record with `cargo run -p crave-core --example record_fixtures`"
        );
        assert!(fresh == shipped, "{name}: pack content is stale");
    }
}

#[test]
fn replay_reproduces_the_scripted_run() {
    for name in SCENARIOS {
        let loaded = scenario(name);
        let direct = loaded.run_scripted(PipelineConfig::default()).unwrap();
        let replayed = replay_engine(name, PipelineConfig::default()).run(loaded.post.clone()).unwrap();
        assert_eq!(direct.deterministic_json(), replayed.deterministic_json(), "{name}");
    }
}

#[test]
fn expected_verdicts() {
    let expect = [
        ("true_claim", Verdict::True, BinaryLabel::True),
        ("ooc_iaf", Verdict::Misleading, BinaryLabel::Misleading),
        ("empty", Verdict::NotEnoughData, BinaryLabel::Misleading),
    ];
    for (name, verdict, binary) in expect {
        let report = replay_engine(name, PipelineConfig::default()).run(scenario(name).post).unwrap();
        assert_eq!(report.verdict, verdict, "{name}");
        assert_eq!(report.binary_verdict, Some(binary), "{name}");
        assert!(!report.verdict_overridden);
        assert_eq!(report.report_version, 1);
    }
}

#[test]
fn true_claim_report_details() {
    let report = replay_engine("true_claim", PipelineConfig::default())
        .run(scenario("true_claim").post)
        .unwrap();
    assert_eq!(report.retrieval.claim.rounds.len(), 1);
    assert!(report.retrieval.claim.stopped_early);
    assert_eq!(report.drop_log.len(), 1);
    assert!(report.explanation.contains("Decisive narrative"));
    let decisive = report.decisive_cluster.unwrap();
    let narrative = &report.clusters.iter().find(|c| c.index == decisive).unwrap().narrative;
    let flat: Vec<&str> = narrative.split_whitespace().collect();
    assert!(report.explanation.contains(&flat.join(" ")));
    assert!(report
        .assessments
        .iter()
        .any(|a| a.image_alignment == Some(AlignmentLabel::Supports)));
}

#[test]
fn ooc_report_filters_the_unrelated_image() {
    let report = replay_engine("ooc_iaf", PipelineConfig::default())
        .run(scenario("ooc_iaf").post)
        .unwrap();
    let dropped: Vec<&str> = report.drop_log.iter().map(|d| d.item_id.as_str()).collect();
    let wire = report
        .evidence
        .iter()
        .find(|i| i.source_url.contains("pakistan-claims-jets"))
        .unwrap();
    assert_eq!(dropped, vec![wire.id.as_str()]);
    for a in &report.assessments {
        assert_ne!(a.image_alignment, Some(AlignmentLabel::Supports));
        assert_ne!(a.text_alignment, Some(AlignmentLabel::Supports));
        assert!(a.dimension_notes.mismatched().contains(&"date"));
    }
}

#[test]
fn empty_report_uses_template_without_llm() {
    let engine = intercepted_engine("empty", |kind, req| {
        (kind == ProviderKind::Llm && llm_task(req) == Some("explain")).then(|| panic!("explain must not be called"))
    });
    let report = engine.run(scenario("empty").post).unwrap();
    assert_eq!(report.verdict, Verdict::NotEnoughData);
    assert_eq!(report.explanation_source, ExplanationSource::Template);
    assert!(report.clusters.is_empty());
}

#[test]
fn rule_wins_over_a_disagreeing_explanation() {
    let engine = intercepted_engine("ooc_iaf", |kind, req| {
        (kind == ProviderKind::Llm && llm_task(req) == Some("explain")).then(|| {
            Ok(json!({"content": r#"{"label": "true", "explanation": "Looks genuine to me."}"#}))
        })
    });
    let report = engine.run(scenario("ooc_iaf").post).unwrap();
    assert_eq!(report.verdict, Verdict::Misleading);
    assert_eq!(report.llm_label, Some(Verdict::True));
    assert!(report.verdict_overridden);
    assert!(report.explanation.starts_with("Looks genuine to me."));
}

#[test]
fn explanation_failure_falls_back_to_template() {
    let engine = intercepted_engine("true_claim", |kind, req| {
        (kind == ProviderKind::Llm && llm_task(req) == Some("explain")).then_some(Err(ProviderError::Timeout { kind }))
    });
    let report = engine.run(scenario("true_claim").post).unwrap();
    assert_eq!(report.verdict, Verdict::True);
    assert_eq!(report.explanation_source, ExplanationSource::Template);
    assert!(report.explanation.contains("Decisive narrative"));
    assert_eq!(report.llm_label, None);
}

#[test]
fn unparseable_assessment_degrades_to_irrelevant() {
    let engine = intercepted_engine("true_claim", |kind, req| {
        if kind != ProviderKind::Llm {
            return None;
        }
        match llm_task(req) {
            Some("assess_cluster") => Some(Ok(json!({"content": "I think it is fine"}))),
            // The explain request embeds the degraded assessments, so it is not in the pack.
            Some("explain") => Some(Err(ProviderError::Timeout { kind })),
            _ => None,
        }
    });
    let report = engine.run(scenario("true_claim").post).unwrap();
    assert!(!report.assessments.is_empty());
    for a in &report.assessments {
        assert!(a.assessment_failed);
        assert!(a.rationale.starts_with(ASSESSMENT_FAILED));
        assert!(a.image_alignment.is_some() || a.text_alignment.is_some());
        for label in [a.image_alignment, a.text_alignment].into_iter().flatten() {
            assert_eq!(label, AlignmentLabel::Irrelevant);
        }
    }
    assert_eq!(report.verdict, Verdict::Misleading);
}

#[test]
fn strict_replay_with_other_settings_fails_on_miss() {
    let config = PipelineConfig {
        max_queries_per_round: 2,
        ..PipelineConfig::default()
    };
    let err = replay_engine("true_claim", config).run(scenario("true_claim").post).unwrap_err();
    assert!(matches!(err, PipelineError::Provider(ProviderError::FixtureMiss { .. })), "{err}");

    let lenient = PipelineConfig {
        max_queries_per_round: 2,
        strict_fixture_mode: false,
        ..PipelineConfig::default()
    };
    let report = replay_engine("true_claim", lenient).run(scenario("true_claim").post).unwrap();
    assert!(!report.errors.is_empty());
}

#[test]
fn report_json_is_stable_and_versioned() {
    let report = replay_engine("ooc_iaf", PipelineConfig::default())
        .run(scenario("ooc_iaf").post)
        .unwrap();
    let full: serde_json::Value = serde_json::from_str(&report.to_json_pretty()).unwrap();
    assert!(full.get("timings").is_some());
    let stable: serde_json::Value = serde_json::from_str(&report.deterministic_json()).unwrap();
    assert!(stable.get("timings").is_none());
    assert_eq!(stable["report_version"], 1);
    assert!(report.deterministic_json().starts_with("{\n  \"report_version\": 1,\n  \"post_id\""));
    let back: crave_core::pipeline::VerdictReport = serde_json::from_value(full).unwrap();
    assert_eq!(back, report);
}

#[test]
fn binary_mode_off_leaves_binary_verdict_empty() {
    let config = PipelineConfig {
        binary_mode: false,
        ..PipelineConfig::default()
    };
    let report = replay_engine("empty", config).run(scenario("empty").post).unwrap();
    assert_eq!(report.binary_verdict, None);
}

#[test]
fn invalid_post_is_rejected() {
    let engine = replay_engine("empty", PipelineConfig::default());
    let mut post = scenario("empty").post;
    post.claim_text = "  ".into();
    assert!(matches!(engine.run(post), Err(PipelineError::Model(_))));
}
