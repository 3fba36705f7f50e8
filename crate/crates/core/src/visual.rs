//! Visual relevance filter: composite face/place/semantic similarity
//! between the claim image and each evidence image.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::EvidenceItem;
use crate::numeric::cosine;
use crate::providers::VisualEmbedding;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VisualError {
    #[error("{0} vector has zero norm")]
    ZeroVector(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityBreakdown {
    pub face_sim: Option<f64>,
    pub place_sim: f64,
    pub sem_sim: f64,
    /// Mean of the component similarities that are present.
    pub composite: f64,
    pub components_used: u8,
}

/// Per-component cosine similarities combined with equal weight. The face
/// component only counts when both images carry a face.
pub fn composite_similarity(a: &VisualEmbedding, b: &VisualEmbedding) -> Result<SimilarityBreakdown, VisualError> {
    let place_sim = cosine(a.place(), b.place()).ok_or(VisualError::ZeroVector("place"))?;
    let sem_sim = cosine(a.sem(), b.sem()).ok_or(VisualError::ZeroVector("sem"))?;
    let face_sim = match (a.face(), b.face()) {
        (Some(fa), Some(fb)) => Some(cosine(fa, fb).ok_or(VisualError::ZeroVector("face"))?),
        _ => None,
    };
    let (sum, used) = match face_sim {
        Some(f) => (f + place_sim + sem_sim, 3u8),
        None => (place_sim + sem_sim, 2u8),
    };
    Ok(SimilarityBreakdown {
        face_sim,
        place_sim,
        sem_sim,
        composite: sum / f64::from(used),
        components_used: used,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropRecord {
    pub item_id: String,
    pub composite: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub kept: Vec<EvidenceItem>,
    pub dropped: Vec<DropRecord>,
}

/// Keeps items whose score is at least `threshold`, and every item without
/// a score (no image, so nothing to vet). Survivor order is preserved.
pub fn filter_by_score(
    items: impl IntoIterator<Item = (EvidenceItem, Option<f64>)>,
    threshold: f64,
) -> FilterOutcome {
    let mut outcome = FilterOutcome::default();
    for (item, score) in items {
        match score {
            Some(composite) if composite < threshold => outcome.dropped.push(DropRecord {
                item_id: item.id.clone(),
                composite,
            }),
            _ => outcome.kept.push(item),
        }
    }
    outcome
}

/// Scores each item's image against the claim image and applies
/// [`filter_by_score`]. `embeddings[i]` belongs to `items[i]`; `None` means
/// the item has no usable image.
pub fn filter_evidence(
    claim: &VisualEmbedding,
    items: &[EvidenceItem],
    embeddings: &[Option<VisualEmbedding>],
    threshold: f64,
) -> Result<FilterOutcome, VisualError> {
    let scored = items
        .iter()
        .zip(embeddings)
        .map(|(item, emb)| {
            let score = match emb {
                Some(e) if item.has_image() => Some(composite_similarity(claim, e)?.composite),
                _ => None,
            };
            Ok((item.clone(), score))
        })
        .collect::<Result<Vec<_>, VisualError>>()?;
    Ok(filter_by_score(scored, threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Origin;
    use crate::providers::{FACE_DIM, PLACE_DIM, SEM_DIM};

    fn basis(dim: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    fn emb(face: Option<usize>, place: usize, sem: usize) -> VisualEmbedding {
        VisualEmbedding::new(face.map(|i| basis(FACE_DIM, i)), basis(PLACE_DIM, place), basis(SEM_DIM, sem)).unwrap()
    }

    fn item(id: &str, image: bool) -> EvidenceItem {
        EvidenceItem {
            id: id.into(),
            origin: Origin::TextSearch,
            text: "t".into(),
            image_ref: image.then(|| format!("https://img.example/{id}.jpg")),
            source_url: format!("https://x.example/{id}"),
            retrieved_round: 1,
        }
    }

    #[test]
    fn identical_and_orthogonal() {
        let a = emb(Some(0), 0, 0);
        let same = composite_similarity(&a, &a).unwrap();
        assert_eq!(same.composite, 1.0);
        assert_eq!(same.components_used, 3);
        let other = composite_similarity(&a, &emb(Some(1), 1, 1)).unwrap();
        assert_eq!(other.composite, 0.0);
    }

    #[test]
    fn missing_face_renormalizes() {
        let mut sem = basis(SEM_DIM, 0);
        sem[1] = 3f64.sqrt();
        let a = emb(None, 0, 0);
        let b = VisualEmbedding::new(Some(basis(FACE_DIM, 0)), basis(PLACE_DIM, 0), sem).unwrap();
        let s = composite_similarity(&a, &b).unwrap();
        assert_eq!(s.face_sim, None);
        assert_eq!(s.components_used, 2);
        assert!((s.sem_sim - 0.5).abs() < 1e-12);
        assert!((s.composite - 0.75).abs() < 1e-12);
    }

    #[test]
    fn zero_vector_is_an_error() {
        let a = emb(None, 0, 0);
        let z = VisualEmbedding::new(None, vec![0.0; PLACE_DIM], basis(SEM_DIM, 0)).unwrap();
        assert_eq!(composite_similarity(&a, &z).unwrap_err(), VisualError::ZeroVector("place"));
    }

    #[test]
    fn threshold_boundary_and_imageless_items() {
        let out = filter_by_score(
            vec![
                (item("hi", true), Some(0.95)),
                (item("lo", true), Some(0.20)),
                (item("eq", true), Some(0.9)),
                (item("just-below", true), Some(0.9 - 1e-9)),
                (item("text-only", false), None),
            ],
            0.9,
        );
        let kept: Vec<&str> = out.kept.iter().map(|i| i.id.as_str()).collect();
        assert_eq!(kept, vec!["hi", "eq", "text-only"]);
        let dropped: Vec<&str> = out.dropped.iter().map(|d| d.item_id.as_str()).collect();
        assert_eq!(dropped, vec!["lo", "just-below"]);
    }

    #[test]
    fn filter_evidence_scores_only_imaged_items() {
        let claim = emb(None, 0, 0);
        let items = vec![item("match", true), item("other", true), item("plain", false)];
        let embeddings = vec![Some(emb(None, 0, 0)), Some(emb(None, 1, 1)), None];
        let out = filter_evidence(&claim, &items, &embeddings, 0.9).unwrap();
        assert_eq!(out.kept.len(), 2);
        assert_eq!(out.dropped, vec![DropRecord { item_id: "other".into(), composite: 0.0 }]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn dense(dim: usize, seed: &[f64]) -> Vec<f64> {
            (0..dim).map(|i| seed[i % seed.len()] + (i as f64).sin() * 0.01).collect()
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn symmetric(a in proptest::collection::vec(-1.0f64..1.0, 1..8),
                         b in proptest::collection::vec(-1.0f64..1.0, 1..8),
                         faces in (any::<bool>(), any::<bool>())) {
                let x = VisualEmbedding::new(faces.0.then(|| dense(FACE_DIM, &a)), dense(PLACE_DIM, &a), dense(SEM_DIM, &b)).unwrap();
                let y = VisualEmbedding::new(faces.1.then(|| dense(FACE_DIM, &b)), dense(PLACE_DIM, &b), dense(SEM_DIM, &a)).unwrap();
                if let (Ok(s1), Ok(s2)) = (composite_similarity(&x, &y), composite_similarity(&y, &x)) {
                    prop_assert!((s1.composite - s2.composite).abs() <= 1e-12);
                    prop_assert!((-1.0..=1.0).contains(&s1.composite));
                }
            }
        }
    }
}
