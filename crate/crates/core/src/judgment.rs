//! Per-cluster alignment assessment, the tiered decision rule, explanation
//! generation and verdict binarization.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::clustering::Cluster;
use crate::model::{EvidenceSet, Post};
use crate::providers::{LlmOutput, LlmRequest, LlmTask, ProviderError, Providers};

const ASSESS_INSTRUCTIONS: &str = "\
You compare a claim against one narrative cluster of retrieved evidence.
Evidence is split into `image_evidence` (pages where the claim's image was found) and `text_evidence` (pages found by \
text search). Treat each group as one coherent story, not as separate items.
For each non-empty group, compare the group with the claim on five dimensions: location, named_person, date, main_topic, \
common_objects. Mark a dimension `match` when the group names the same entity as the claim, `mismatch` when both name \
an entity and they disagree, and `absent` when either side names nothing for it.
Return null for a group that has no evidence. Give a one or two sentence rationale.";

const EXPLAIN_INSTRUCTIONS: &str = "\
You write the justification of a fact-check for a reader.
Labels: `true` when some narrative supports the claim, giving priority to narratives backed by image evidence; \
`misleading` when every narrative conflicts with the claim or is irrelevant to it; `not_enough_data` when there is no \
evidence.
Ground the explanation in the supplied alignment assessments and quote the narrative that decides the outcome. \
Return your label and a short explanation.";

pub const ASSESSMENT_FAILED: &str = "assessment failed";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentLabel {
    Supports,
    Conflicts,
    Irrelevant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimensionNote {
    Match,
    Mismatch,
    #[default]
    Absent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimensionNotes {
    pub location: DimensionNote,
    pub named_person: DimensionNote,
    pub date: DimensionNote,
    pub main_topic: DimensionNote,
    pub common_objects: DimensionNote,
}

impl DimensionNotes {
    pub const NAMES: [&'static str; 5] = ["location", "named_person", "date", "main_topic", "common_objects"];

    pub fn all(note: DimensionNote) -> Self {
        Self {
            location: note,
            named_person: note,
            date: note,
            main_topic: note,
            common_objects: note,
        }
    }

    pub fn values(&self) -> [DimensionNote; 5] {
        [self.location, self.named_person, self.date, self.main_topic, self.common_objects]
    }

    fn from_values(v: [DimensionNote; 5]) -> Self {
        Self {
            location: v[0],
            named_person: v[1],
            date: v[2],
            main_topic: v[3],
            common_objects: v[4],
        }
    }

    /// Any mismatch conflicts; nothing comparable is irrelevant; otherwise
    /// the entities align.
    pub fn alignment(&self) -> AlignmentLabel {
        let values = self.values();
        if values.contains(&DimensionNote::Mismatch) {
            AlignmentLabel::Conflicts
        } else if values.iter().all(|n| *n == DimensionNote::Absent) {
            AlignmentLabel::Irrelevant
        } else {
            AlignmentLabel::Supports
        }
    }

    /// Per dimension: mismatch over match over absent.
    pub fn combine(&self, other: &Self) -> Self {
        let rank = |n: DimensionNote| match n {
            DimensionNote::Mismatch => 2,
            DimensionNote::Match => 1,
            DimensionNote::Absent => 0,
        };
        let (a, b) = (self.values(), other.values());
        Self::from_values(std::array::from_fn(|i| if rank(a[i]) >= rank(b[i]) { a[i] } else { b[i] }))
    }

    pub fn mismatched(&self) -> Vec<&'static str> {
        Self::NAMES
            .iter()
            .zip(self.values())
            .filter(|(_, n)| *n == DimensionNote::Mismatch)
            .map(|(name, _)| *name)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NarrativeAssessment {
    pub cluster_index: usize,
    pub narrative: String,
    /// `None` when the cluster has no image-origin evidence.
    pub image_alignment: Option<AlignmentLabel>,
    /// `None` when the cluster has no text-origin evidence.
    pub text_alignment: Option<AlignmentLabel>,
    pub dimension_notes: DimensionNotes,
    pub rationale: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub assessment_failed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    True,
    Misleading,
    NotEnoughData,
}

impl Verdict {
    pub const ALL: [Verdict; 3] = [Verdict::True, Verdict::Misleading, Verdict::NotEnoughData];

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::True => "true",
            Verdict::Misleading => "misleading",
            Verdict::NotEnoughData => "not_enough_data",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Verdict::True => "True",
            Verdict::Misleading => "Misleading",
            Verdict::NotEnoughData => "Not enough data",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryLabel {
    True,
    Misleading,
}

impl BinaryLabel {
    pub const ALL: [BinaryLabel; 2] = [BinaryLabel::True, BinaryLabel::Misleading];

    pub fn as_str(self) -> &'static str {
        match self {
            BinaryLabel::True => "true",
            BinaryLabel::Misleading => "misleading",
        }
    }

    pub fn parse(raw: &str) -> Option<Self> {
        match raw.trim().to_lowercase().as_str() {
            "true" => Some(BinaryLabel::True),
            "misleading" | "false" => Some(BinaryLabel::Misleading),
            _ => None,
        }
    }
}

/// Not enough data counts as misleading.
pub fn binarize_verdict(verdict: Verdict) -> BinaryLabel {
    match verdict {
        Verdict::True => BinaryLabel::True,
        Verdict::Misleading | Verdict::NotEnoughData => BinaryLabel::Misleading,
    }
}

/// The decision protocol: no evidence gives not enough data; any
/// image-backed support wins; then any text-backed support; otherwise the
/// claim is misleading.
pub fn rule_verdict(assessments: &[NarrativeAssessment], evidence_empty: bool) -> Verdict {
    if evidence_empty {
        Verdict::NotEnoughData
    } else if assessments.iter().any(|a| a.image_alignment == Some(AlignmentLabel::Supports))
        || assessments.iter().any(|a| a.text_alignment == Some(AlignmentLabel::Supports))
    {
        Verdict::True
    } else {
        Verdict::Misleading
    }
}

/// The assessment that settles `verdict`: the first image-backed support,
/// else the first text-backed support for `True`; the first conflicting
/// assessment, else the first one, for `Misleading`.
pub fn decisive_assessment(assessments: &[NarrativeAssessment], verdict: Verdict) -> Option<&NarrativeAssessment> {
    let find = |pred: &dyn Fn(&NarrativeAssessment) -> bool| assessments.iter().find(|a| pred(a));
    match verdict {
        Verdict::NotEnoughData => None,
        Verdict::True => find(&|a| a.image_alignment == Some(AlignmentLabel::Supports))
            .or_else(|| find(&|a| a.text_alignment == Some(AlignmentLabel::Supports))),
        Verdict::Misleading => find(&|a| {
            a.image_alignment == Some(AlignmentLabel::Conflicts) || a.text_alignment == Some(AlignmentLabel::Conflicts)
        })
        .or_else(|| assessments.first()),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AssessOutput {
    image_evidence: Option<DimensionNotes>,
    text_evidence: Option<DimensionNotes>,
    rationale: String,
}

impl LlmOutput for AssessOutput {
    fn schema() -> Value {
        let note = json!({"enum": ["match", "mismatch", "absent"]});
        let notes = json!({
            "type": ["object", "null"],
            "additionalProperties": false,
            "required": DimensionNotes::NAMES,
            "properties": {
                "location": note, "named_person": note, "date": note, "main_topic": note, "common_objects": note
            }
        });
        json!({
            "type": "object",
            "additionalProperties": false,
            "required": ["image_evidence", "text_evidence", "rationale"],
            "properties": {"image_evidence": notes, "text_evidence": notes, "rationale": {"type": "string"}}
        })
    }

    fn validate(&self) -> Result<(), String> {
        if self.image_evidence.is_none() && self.text_evidence.is_none() {
            return Err("no evidence group was assessed".into());
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExplainOutput {
    label: Verdict,
    explanation: String,
}

impl LlmOutput for ExplainOutput {
    fn schema() -> Value {
        json!({
            "type": "object",
            "additionalProperties": false,
            "required": ["label", "explanation"],
            "properties": {
                "label": {"enum": ["true", "misleading", "not_enough_data"]},
                "explanation": {"type": "string"}
            }
        })
    }

    fn validate(&self) -> Result<(), String> {
        if self.explanation.trim().is_empty() {
            return Err("empty explanation".into());
        }
        Ok(())
    }
}

fn is_fatal(providers: &Providers, error: &ProviderError) -> bool {
    providers.is_strict() && error.is_fixture_miss()
}

fn failed_assessment(cluster: &Cluster, has_image: bool, has_text: bool, detail: String) -> NarrativeAssessment {
    NarrativeAssessment {
        cluster_index: cluster.index,
        narrative: cluster.narrative.clone(),
        image_alignment: has_image.then_some(AlignmentLabel::Irrelevant),
        text_alignment: has_text.then_some(AlignmentLabel::Irrelevant),
        dimension_notes: DimensionNotes::default(),
        rationale: format!("{ASSESSMENT_FAILED}: {detail}"),
        assessment_failed: true,
    }
}

/// One LLM call comparing the claim with the cluster's member texts, split
/// by origin. Failures other than strict fixture misses degrade the cluster
/// to irrelevant.
pub fn assess_cluster(
    providers: &Providers,
    claim_text: &str,
    cluster: &Cluster,
    evidence: &EvidenceSet,
) -> Result<NarrativeAssessment, ProviderError> {
    let texts = |ids: &[String]| -> Vec<String> {
        ids.iter()
            .filter_map(|id| evidence.get(id))
            .map(|item| item.clustering_text().to_string())
            .collect()
    };
    let image_texts = texts(&cluster.members_image);
    let text_texts = texts(&cluster.members_text);
    let (has_image, has_text) = (!image_texts.is_empty(), !text_texts.is_empty());
    if !has_image && !has_text {
        return Ok(failed_assessment(cluster, false, false, "cluster has no members".into()));
    }
    let request = LlmRequest::new(
        LlmTask::AssessCluster,
        ASSESS_INSTRUCTIONS,
        json!({
            "claim": claim_text,
            "narrative": cluster.narrative,
            "image_evidence": has_image.then_some(&image_texts),
            "text_evidence": has_text.then_some(&text_texts),
        }),
        AssessOutput::schema(),
    );
    let output = match providers.llm_complete::<AssessOutput>(request) {
        Ok(out) => out.value,
        Err(e) if is_fatal(providers, &e) => return Err(e),
        Err(e) => return Ok(failed_assessment(cluster, has_image, has_text, e.to_string())),
    };
    let image_notes = output.image_evidence.filter(|_| has_image);
    let text_notes = output.text_evidence.filter(|_| has_text);
    if image_notes.is_none() != !has_image || text_notes.is_none() != !has_text {
        return Ok(failed_assessment(
            cluster,
            has_image,
            has_text,
            "an evidence group was left unassessed".into(),
        ));
    }
    let dimension_notes = match (image_notes, text_notes) {
        (Some(i), Some(t)) => i.combine(&t),
        (Some(n), None) | (None, Some(n)) => n,
        (None, None) => DimensionNotes::default(),
    };
    Ok(NarrativeAssessment {
        cluster_index: cluster.index,
        narrative: cluster.narrative.clone(),
        image_alignment: image_notes.map(|n| n.alignment()),
        text_alignment: text_notes.map(|n| n.alignment()),
        dimension_notes,
        rationale: output.rationale.trim().to_string(),
        assessment_failed: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplanationSource {
    Llm,
    Template,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Judgment {
    pub verdict: Verdict,
    pub binary_verdict: Option<BinaryLabel>,
    /// Label proposed by the explanation model, when one was produced.
    pub llm_label: Option<Verdict>,
    /// The explanation model disagreed and the rule result was kept.
    pub verdict_overridden: bool,
    pub explanation: String,
    pub explanation_source: ExplanationSource,
    pub decisive_cluster: Option<usize>,
}

fn alignment_str(label: Option<AlignmentLabel>) -> &'static str {
    match label {
        Some(AlignmentLabel::Supports) => "supports",
        Some(AlignmentLabel::Conflicts) => "conflicts",
        Some(AlignmentLabel::Irrelevant) => "irrelevant",
        None => "no evidence",
    }
}

fn citation(a: &NarrativeAssessment) -> String {
    let narrative: Vec<&str> = a.narrative.split_whitespace().collect();
    format!("Decisive narrative (cluster {}): \"{}\"", a.cluster_index, narrative.join(" "))
}

/// Explanation built only from the assessments.
pub fn template_explanation(verdict: Verdict, assessments: &[NarrativeAssessment]) -> String {
    let Some(decisive) = decisive_assessment(assessments, verdict) else {
        return "No evidence remained after retrieval and visual filtering, so the claim cannot be assessed.".into();
    };
    let mismatched = decisive.dimension_notes.mismatched();
    let detail = if mismatched.is_empty() {
        "no dimension disagrees with the claim".to_string()
    } else {
        format!("the evidence disagrees with the claim on {}", mismatched.join(", "))
    };
    let lead = match verdict {
        Verdict::True => "The claim is supported by retrieved evidence.",
        _ => "No evidence cluster supports the claim.",
    };
    format!(
        "{lead} Image evidence {}, text evidence {}; {detail}. {}",
        alignment_str(decisive.image_alignment),
        alignment_str(decisive.text_alignment),
        citation(decisive)
    )
}

/// Applies the decision rule, then asks the LLM for a justification. The
/// rule verdict always stands; a disagreeing LLM label is recorded as an
/// override. Explanation failures fall back to [`template_explanation`].
pub fn judge(
    providers: &Providers,
    post: &Post,
    assessments: &[NarrativeAssessment],
    evidence_empty: bool,
    binary_mode: bool,
) -> Result<Judgment, ProviderError> {
    let verdict = rule_verdict(assessments, evidence_empty);
    let decisive = decisive_assessment(assessments, verdict);
    let mut judgment = Judgment {
        verdict,
        binary_verdict: binary_mode.then(|| binarize_verdict(verdict)),
        llm_label: None,
        verdict_overridden: false,
        explanation: template_explanation(verdict, assessments),
        explanation_source: ExplanationSource::Template,
        decisive_cluster: decisive.map(|a| a.cluster_index),
    };
    let Some(decisive) = decisive else {
        return Ok(judgment);
    };
    let request = LlmRequest::new(
        LlmTask::Explain,
        EXPLAIN_INSTRUCTIONS,
        json!({ "claim": post.claim_text, "narratives": assessments }),
        ExplainOutput::schema(),
    );
    match providers.llm_complete::<ExplainOutput>(request) {
        Ok(out) => {
            let out = out.value;
            judgment.llm_label = Some(out.label);
            judgment.verdict_overridden = out.label != verdict;
            judgment.explanation = format!("{} {}", out.explanation.trim(), citation(decisive));
            judgment.explanation_source = ExplanationSource::Llm;
        }
        Err(e) if is_fatal(providers, &e) => return Err(e),
        Err(e) => log::warn!("explanation generation failed, using template: {e}"),
    }
    Ok(judgment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use DimensionNote::*;

    fn assessment(image: Option<AlignmentLabel>, text: Option<AlignmentLabel>) -> NarrativeAssessment {
        NarrativeAssessment {
            cluster_index: 0,
            narrative: "n".into(),
            image_alignment: image,
            text_alignment: text,
            dimension_notes: DimensionNotes::default(),
            rationale: String::new(),
            assessment_failed: false,
        }
    }

    #[test]
    fn alignment_from_notes() {
        assert_eq!(DimensionNotes::all(Match).alignment(), AlignmentLabel::Supports);
        assert_eq!(DimensionNotes::all(Absent).alignment(), AlignmentLabel::Irrelevant);
        let date_off = DimensionNotes {
            date: Mismatch,
            ..DimensionNotes::all(Match)
        };
        assert_eq!(date_off.alignment(), AlignmentLabel::Conflicts);
        assert_eq!(date_off.mismatched(), vec!["date"]);
        let partial = DimensionNotes {
            location: Match,
            ..Default::default()
        };
        assert_eq!(partial.alignment(), AlignmentLabel::Supports);
    }

    #[test]
    fn combine_prefers_mismatch() {
        let a = DimensionNotes {
            date: Mismatch,
            location: Match,
            ..Default::default()
        };
        let b = DimensionNotes {
            date: Match,
            named_person: Match,
            ..Default::default()
        };
        let c = a.combine(&b);
        assert_eq!(c.date, Mismatch);
        assert_eq!(c.location, Match);
        assert_eq!(c.named_person, Match);
        assert_eq!(c.main_topic, Absent);
        assert_eq!(c, b.combine(&a));
    }

    #[test]
    fn rule_examples() {
        use AlignmentLabel::*;
        assert_eq!(rule_verdict(&[assessment(Some(Supports), None)], false), Verdict::True);
        assert_eq!(rule_verdict(&[assessment(Some(Conflicts), Some(Supports))], false), Verdict::True);
        assert_eq!(
            rule_verdict(
                &[assessment(Some(Conflicts), Some(Conflicts)), assessment(None, Some(Irrelevant))],
                false
            ),
            Verdict::Misleading
        );
        assert_eq!(rule_verdict(&[], true), Verdict::NotEnoughData);
        assert_eq!(rule_verdict(&[assessment(Some(Supports), None)], true), Verdict::NotEnoughData);
    }

    #[test]
    fn binarization() {
        assert_eq!(binarize_verdict(Verdict::True), BinaryLabel::True);
        assert_eq!(binarize_verdict(Verdict::Misleading), BinaryLabel::Misleading);
        assert_eq!(binarize_verdict(Verdict::NotEnoughData), BinaryLabel::Misleading);
    }

    #[test]
    fn decisive_prefers_image_support() {
        use AlignmentLabel::*;
        let mut list = vec![assessment(None, Some(Supports)), assessment(Some(Supports), None)];
        list[0].cluster_index = 0;
        list[1].cluster_index = 1;
        assert_eq!(decisive_assessment(&list, Verdict::True).unwrap().cluster_index, 1);
        assert!(decisive_assessment(&list, Verdict::NotEnoughData).is_none());
    }

    #[test]
    fn template_cites_narrative() {
        let mut a = assessment(Some(AlignmentLabel::Conflicts), None);
        a.narrative = "Crash in 2016".into();
        a.dimension_notes.date = Mismatch;
        let text = template_explanation(Verdict::Misleading, &[a]);
        assert!(text.contains("\"Crash in 2016\""));
        assert!(text.contains("date"));
    }

    #[test]
    fn verdict_serialization() {
        assert_eq!(serde_json::to_value(Verdict::NotEnoughData).unwrap(), json!("not_enough_data"));
        assert_eq!(serde_json::to_value(BinaryLabel::True).unwrap(), json!("true"));
        assert_eq!(BinaryLabel::parse("False"), Some(BinaryLabel::Misleading));
        assert_eq!(BinaryLabel::parse("maybe"), None);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn label() -> impl Strategy<Value = Option<AlignmentLabel>> {
            prop_oneof![
                Just(None),
                Just(Some(AlignmentLabel::Supports)),
                Just(Some(AlignmentLabel::Conflicts)),
                Just(Some(AlignmentLabel::Irrelevant)),
            ]
        }

        proptest! {
            #[test]
            fn permutation_invariant_and_dominated(
                pairs in proptest::collection::vec((label(), label()), 0..6),
                rotate in 0usize..6,
            ) {
                let list: Vec<_> = pairs.iter().map(|(i, t)| assessment(*i, *t)).collect();
                let mut rotated = list.clone();
                if !rotated.is_empty() {
                    let r = rotate % rotated.len();
                    rotated.rotate_left(r);
                }
                rotated.reverse();
                prop_assert_eq!(rule_verdict(&list, false), rule_verdict(&rotated, false));
                let mut boosted = list.clone();
                boosted.push(assessment(Some(AlignmentLabel::Supports), None));
                prop_assert_eq!(rule_verdict(&boosted, false), Verdict::True);
            }
        }
    }
}
