//! Threshold sweep over average-linkage agglomerative clustering.
//!
//! Each embedding set is clustered once on cosine distance; the dendrogram
//! is then cut at every similarity threshold, merging only clusters whose
//! average similarity is at least the threshold. Per threshold we report
//! the mean cluster count and the mean Shannon entropy (bits) of the
//! cluster-size distribution across sets.

use std::io::Write;

use kodama::{linkage, Method};
use serde::{Deserialize, Serialize};

use super::ClusterError;
use crate::numeric::cosine;

const CUT_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub mean_clusters: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicSweep {
    pub rows: Vec<SweepRow>,
    /// Threshold with the highest mean entropy (lowest threshold on ties).
    pub peak_entropy_threshold: f64,
    pub sets: usize,
}

impl DynamicSweep {
    /// `threshold,mean_clusters,entropy` CSV with a header line.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "threshold,mean_clusters,entropy")?;
        for row in &self.rows {
            writeln!(out, "{:.4},{:.6},{:.6}", row.threshold, row.mean_clusters, row.entropy)?;
        }
        Ok(())
    }
}

/// Shannon entropy in bits of the distribution given by `sizes`.
pub fn size_entropy(sizes: &[usize]) -> f64 {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let h: f64 = sizes
        .iter()
        .filter(|&&s| s > 0)
        .map(|&s| {
            let p = s as f64 / total as f64;
            -p * p.log2()
        })
        .sum();
    h.max(0.0)
}

/// A built dendrogram for one embedding set.
pub struct Agglomeration {
    observations: usize,
    steps: Vec<kodama::Step<f64>>,
}

impl Agglomeration {
    pub fn new(embeddings: &[Vec<f64>]) -> Result<Self, ClusterError> {
        let n = embeddings.len();
        if n == 0 {
            return Err(ClusterError::EmptyInput);
        }
        let mut condensed = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                let similarity = cosine(&embeddings[i], &embeddings[j]).unwrap_or(0.0);
                condensed.push((1.0 - similarity).max(0.0));
            }
        }
        let steps = if n > 1 {
            linkage(&mut condensed, n, Method::Average).steps().to_vec()
        } else {
            Vec::new()
        };
        Ok(Self { observations: n, steps })
    }

    /// Cluster sizes after merging every pair with average similarity at
    /// least `threshold`.
    pub fn cut(&self, threshold: f64) -> Vec<usize> {
        let n = self.observations;
        let max_distance = 1.0 - threshold + CUT_EPSILON;
        let mut sizes: Vec<Option<usize>> = vec![Some(1); n];
        sizes.extend(std::iter::repeat_n(None, self.steps.len()));
        for (s, step) in self.steps.iter().enumerate() {
            if step.dissimilarity > max_distance {
                continue;
            }
            if let (Some(_), Some(_)) = (sizes[step.cluster1], sizes[step.cluster2]) {
                sizes[step.cluster1] = None;
                sizes[step.cluster2] = None;
                sizes[n + s] = Some(step.size);
            }
        }
        sizes.into_iter().flatten().collect()
    }
}

/// Sweeps ascending `thresholds` over every non-empty embedding set.
pub fn dynamic_cluster_analysis(sets: &[Vec<Vec<f64>>], thresholds: &[f64]) -> Result<DynamicSweep, ClusterError> {
    if thresholds.is_empty() || thresholds.windows(2).any(|w| w[0] > w[1]) || thresholds.iter().any(|t| !t.is_finite()) {
        return Err(ClusterError::InvalidThresholds);
    }
    let dendrograms: Vec<Agglomeration> = sets
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| Agglomeration::new(s))
        .collect::<Result<_, _>>()?;
    if dendrograms.is_empty() {
        return Err(ClusterError::EmptyInput);
    }
    let count = dendrograms.len() as f64;
    let rows: Vec<SweepRow> = thresholds
        .iter()
        .map(|&threshold| {
            let (clusters, entropy) = dendrograms.iter().fold((0.0, 0.0), |(c, h), d| {
                let sizes = d.cut(threshold);
                (c + sizes.len() as f64, h + size_entropy(&sizes))
            });
            SweepRow {
                threshold,
                mean_clusters: clusters / count,
                entropy: entropy / count,
            }
        })
        .collect();
    let peak = rows
        .iter()
        .fold(None, |best: Option<&SweepRow>, row| match best {
            Some(b) if b.entropy >= row.entropy => Some(b),
            _ => Some(row),
        })
        .expect("non-empty thresholds");
    Ok(DynamicSweep {
        peak_entropy_threshold: peak.threshold,
        rows,
        sets: dendrograms.len(),
    })
}

/// Parses `start:end:step` into an inclusive ascending threshold list.
pub fn parse_threshold_range(spec: &str) -> Result<Vec<f64>, ClusterError> {
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| ClusterError::InvalidThresholds)?;
    let [start, end, step] = parts[..] else {
        return Err(ClusterError::InvalidThresholds);
    };
    if step.is_nan() || step <= 0.0 || end < start || !start.is_finite() || !end.is_finite() {
        return Err(ClusterError::InvalidThresholds);
    }
    let steps = ((end - start) / step + 1e-9).floor() as usize;
    Ok((0..=steps)
        .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
        .collect())
}
