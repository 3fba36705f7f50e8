//! Labeled datasets, batch runs and the accuracy / F1 / not-enough-data
//! breakdowns.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::judgment::{binarize_verdict, BinaryLabel, Verdict};
use crate::model::{validate_post, Post};
use crate::pipeline::Engine;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {detail}")]
    MalformedRecord { line: usize, detail: String },
    #[error("line {line}: duplicate post id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: unknown label {label:?}")]
    UnknownLabel { line: usize, label: String },
    #[error("no rows to evaluate")]
    EmptyDataset,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    claim_text: String,
    image_ref: String,
    label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPost {
    pub post: Post,
    pub gold: BinaryLabel,
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<LabeledPost>, EvalError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_dataset(&text, path.parent())
}

/// Parses JSONL records. Relative image paths are resolved against
/// `base_dir`. Blank lines are skipped.
pub fn parse_dataset(text: &str, base_dir: Option<&Path>) -> Result<Vec<LabeledPost>, EvalError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (index, raw_line) in text.lines().enumerate() {
        let line = index + 1;
        if raw_line.trim().is_empty() {
            continue;
        }
        let record: RawRecord = serde_json::from_str(raw_line).map_err(|e| EvalError::MalformedRecord {
            line,
            detail: e.to_string(),
        })?;
        let gold = BinaryLabel::parse(&record.label).ok_or_else(|| EvalError::UnknownLabel {
            line,
            label: record.label.clone(),
        })?;
        let id = record.id.trim().to_string();
        if id.is_empty() {
            return Err(EvalError::MalformedRecord {
                line,
                detail: "empty id".into(),
            });
        }
        if !seen.insert(id.clone()) {
            return Err(EvalError::DuplicateId { line, id });
        }
        let image_ref = resolve_image_ref(record.image_ref.trim(), base_dir);
        let post = validate_post(Post::new(id, record.claim_text, image_ref)).map_err(|e| {
            EvalError::MalformedRecord {
                line,
                detail: e.to_string(),
            }
        })?;
        out.push(LabeledPost { post, gold });
    }
    Ok(out)
}

fn resolve_image_ref(image_ref: &str, base_dir: Option<&Path>) -> String {
    let is_reference = image_ref.starts_with("sha256:") || image_ref.contains("://");
    match base_dir {
        Some(base) if !is_reference && !image_ref.is_empty() && Path::new(image_ref).is_relative() => {
            base.join(image_ref).to_string_lossy().into_owned()
        }
        _ => image_ref.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub post_id: String,
    pub gold: BinaryLabel,
    pub predicted: Verdict,
    pub binary_prediction: BinaryLabel,
    pub correct: bool,
}

impl EvalRow {
    pub fn new(post_id: impl Into<String>, gold: BinaryLabel, predicted: Verdict) -> Self {
        let binary_prediction = binarize_verdict(predicted);
        Self {
            post_id: post_id.into(),
            gold,
            predicted,
            binary_prediction,
            correct: gold == binary_prediction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub gold: usize,
    pub predicted: usize,
    pub true_positive: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub f1_averaging: String,
    pub per_class: BTreeMap<String, ClassMetrics>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy and F1 macro-averaged over both labels. A class with no
/// predictions or no gold rows gets precision/recall 0, hence F1 0.
pub fn evaluate(rows: &[EvalRow]) -> Result<Metrics, EvalError> {
    if rows.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let correct = rows.iter().filter(|r| r.correct).count();
    let per_class: BTreeMap<String, ClassMetrics> = BinaryLabel::ALL
        .iter()
        .map(|&label| {
            let gold = rows.iter().filter(|r| r.gold == label).count();
            let predicted = rows.iter().filter(|r| r.binary_prediction == label).count();
            let tp = rows
                .iter()
                .filter(|r| r.gold == label && r.binary_prediction == label)
                .count();
            let (precision, recall) = (ratio(tp, predicted), ratio(tp, gold));
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            (
                label.as_str().to_string(),
                ClassMetrics {
                    gold,
                    predicted,
                    true_positive: tp,
                    precision,
                    recall,
                    f1,
                },
            )
        })
        .collect();
    let macro_f1 = per_class.values().map(|c| c.f1).sum::<f64>() / per_class.len() as f64;
    Ok(Metrics {
        total: rows.len(),
        correct,
        accuracy: ratio(correct, rows.len()),
        macro_f1,
        f1_averaging: "macro".into(),
        per_class,
    })
}

/// Not-enough-data breakdown, in percent rounded to 0.01.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodReport {
    pub total: usize,
    /// Rows whose binary prediction is misleading, over all rows.
    pub pct_pred_false: f64,
    /// Not-enough-data rows over rows predicted misleading.
    pub pct_false_preds_that_are_nod: f64,
    /// Not-enough-data rows with gold label true, over all rows.
    pub nod_with_gt_true: f64,
    /// Not-enough-data rows with gold label misleading, over all rows.
    pub nod_with_gt_false: f64,
    /// Not-enough-data rows over all rows.
    pub pct_nod_total: f64,
}

fn percent(num: usize, den: usize) -> f64 {
    (ratio(num, den) * 10000.0).round() / 100.0
}

pub fn nod_report(rows: &[EvalRow]) -> Result<NodReport, EvalError> {
    if rows.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let total = rows.len();
    let pred_false = rows
        .iter()
        .filter(|r| r.binary_prediction == BinaryLabel::Misleading)
        .count();
    let nod: Vec<&EvalRow> = rows.iter().filter(|r| r.predicted == Verdict::NotEnoughData).collect();
    let nod_true = nod.iter().filter(|r| r.gold == BinaryLabel::True).count();
    Ok(NodReport {
        total,
        pct_pred_false: percent(pred_false, total),
        pct_false_preds_that_are_nod: percent(nod.len(), pred_false),
        nod_with_gt_true: percent(nod_true, total),
        nod_with_gt_false: percent(nod.len() - nod_true, total),
        pct_nod_total: percent(nod.len(), total),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostFailure {
    pub post_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    /// `None` when no post produced a verdict.
    pub metrics: Option<Metrics>,
    pub nod: Option<NodReport>,
    pub rows: Vec<EvalRow>,
    pub failures: Vec<PostFailure>,
}

impl BatchSummary {
    pub fn from_rows(mut rows: Vec<EvalRow>, mut failures: Vec<PostFailure>) -> Self {
        rows.sort_by(|a, b| a.post_id.cmp(&b.post_id));
        failures.sort_by(|a, b| a.post_id.cmp(&b.post_id));
        Self {
            metrics: evaluate(&rows).ok(),
            nod: nod_report(&rows).ok(),
            rows,
            failures,
        }
    }

    /// Aligned plain-text table of the headline numbers.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let mut line = |name: &str, value: String| {
            let _ = writeln!(out, "{name:<32} {value:>10}");
        };
        line("posts evaluated", self.rows.len().to_string());
        line("posts failed", self.failures.len().to_string());
        if let Some(m) = &self.metrics {
            line("accuracy", format!("{:.4}", m.accuracy));
            line("macro F1", format!("{:.4}", m.macro_f1));
            for (label, c) in &m.per_class {
                line(&format!("F1 ({label})"), format!("{:.4}", c.f1));
            }
        }
        if let Some(n) = &self.nod {
            line("% predicted misleading", format!("{:.2}", n.pct_pred_false));
            line("% misleading preds that are NoD", format!("{:.2}", n.pct_false_preds_that_are_nod));
            line("% NoD with gold true", format!("{:.2}", n.nod_with_gt_true));
            line("% NoD with gold misleading", format!("{:.2}", n.nod_with_gt_false));
        }
        out
    }
}

/// Runs every post, up to `max_concurrency` at a time. Results are ordered
/// by post id whatever the completion order.
pub fn run_batch(engine: &Engine, posts: &[LabeledPost]) -> BatchSummary {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(engine.config().max_concurrency)
        .build()
        .expect("thread pool");
    let results: Vec<Result<EvalRow, PostFailure>> = pool.install(|| {
        posts
            .par_iter()
            .map(|lp| {
                engine
                    .run(lp.post.clone())
                    .map(|report| EvalRow::new(lp.post.id.clone(), lp.gold, report.verdict))
                    .map_err(|e| PostFailure {
                        post_id: lp.post.id.clone(),
                        error: e.to_string(),
                    })
            })
            .collect()
    });
    let (mut rows, mut failures) = (Vec::new(), Vec::new());
    for r in results {
        match r {
            Ok(row) => rows.push(row),
            Err(f) => failures.push(f),
        }
    }
    BatchSummary::from_rows(rows, failures)
}
