//! Narrative clustering of evidence texts and cluster diagnostics.

mod dynamic;
mod kmeans;
mod metrics;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dynamic::{dynamic_cluster_analysis, parse_threshold_range, size_entropy, Agglomeration, DynamicSweep, SweepRow};
pub use kmeans::{assign_to_centroids, kmeans, kmeans_with, KMeansOptions, KMeansResult};
pub use metrics::{cluster_metrics, davies_bouldin, silhouette, ClusterQualityReport};

use crate::model::{EvidenceItem, Origin};
use crate::numeric::squared_distance;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClusterError {
    #[error("nothing to cluster")]
    EmptyInput,
    #[error("cluster count must be at least 1")]
    InvalidK,
    #[error("embeddings have inconsistent dimensions")]
    DimensionMismatch,
    #[error("thresholds must be finite, non-empty and ascending")]
    InvalidThresholds,
    #[error("embedding count does not match evidence count")]
    LengthMismatch,
}

/// A narrative group: member evidence ids split by retrieval origin, the
/// centroid, and the member text closest to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub index: usize,
    pub members_image: Vec<String>,
    pub members_text: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub centroid: Vec<f64>,
    pub narrative: String,
    pub narrative_member_id: String,
}

impl Cluster {
    pub fn len(&self) -> usize {
        self.members_image.len() + self.members_text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn member_ids(&self) -> impl Iterator<Item = &String> {
        self.members_image.iter().chain(&self.members_text)
    }

    pub fn add_member(&mut self, item: &EvidenceItem) {
        match item.origin {
            Origin::ReverseImage => self.members_image.push(item.id.clone()),
            Origin::TextSearch => self.members_text.push(item.id.clone()),
        }
    }
}

/// Ordinal of the member nearest `centroid`; ties go to the lowest ordinal.
/// `members` are ordinals into `embeddings` and must be non-empty.
pub fn select_narrative(members: &[usize], embeddings: &[Vec<f64>], centroid: &[f64]) -> usize {
    let mut best = (members[0], f64::INFINITY);
    let mut sorted = members.to_vec();
    sorted.sort_unstable();
    for ordinal in sorted {
        let d = squared_distance(&embeddings[ordinal], centroid);
        if d < best.1 {
            best = (ordinal, d);
        }
    }
    best.0
}

/// Cluster index for each new embedding: the nearest existing centroid,
/// lower index on ties. Centroids are left untouched.
pub fn assign_refined(new_embeddings: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<usize> {
    if centroids.is_empty() {
        return Vec::new();
    }
    assign_to_centroids(new_embeddings, centroids)
}

/// Turns a k-means result over `items` into clusters with narratives.
pub fn build_clusters(
    items: &[EvidenceItem],
    embeddings: &[Vec<f64>],
    result: &KMeansResult,
) -> Result<Vec<Cluster>, ClusterError> {
    if items.len() != embeddings.len() || items.len() != result.assignment.len() {
        return Err(ClusterError::LengthMismatch);
    }
    Ok(result
        .members()
        .into_iter()
        .enumerate()
        .filter(|(_, members)| !members.is_empty())
        .map(|(index, members)| {
            let centroid = result.centroids[index].clone();
            let narrative_ordinal = select_narrative(&members, embeddings, &centroid);
            let narrative_item = &items[narrative_ordinal];
            let mut cluster = Cluster {
                index,
                members_image: Vec::new(),
                members_text: Vec::new(),
                centroid,
                narrative: narrative_item.clustering_text().to_string(),
                narrative_member_id: narrative_item.id.clone(),
            };
            for &m in &members {
                cluster.add_member(&items[m]);
            }
            cluster
        })
        .collect())
}
