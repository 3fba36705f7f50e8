use serde::{Deserialize, Serialize};

use super::dynamic::SweepRow;
use crate::numeric::distance;

/// Internal cluster-quality indices. `None` marks a metric that is
/// undefined for the clustering (fewer than two non-empty clusters).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterQualityReport {
    pub silhouette: Option<f64>,
    pub davies_bouldin: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<SweepRow>,
}

pub fn cluster_metrics(points: &[Vec<f64>], assignment: &[usize]) -> ClusterQualityReport {
    ClusterQualityReport {
        silhouette: silhouette(points, assignment),
        davies_bouldin: davies_bouldin(points, assignment),
        sweep: Vec::new(),
    }
}

fn groups(assignment: &[usize]) -> Vec<Vec<usize>> {
    let k = assignment.iter().max().map_or(0, |m| m + 1);
    let mut groups = vec![Vec::new(); k];
    for (i, &c) in assignment.iter().enumerate() {
        groups[c].push(i);
    }
    groups.retain(|g| !g.is_empty());
    groups
}

fn mean_distance(points: &[Vec<f64>], from: usize, to: &[usize]) -> f64 {
    let sum: f64 = to.iter().map(|&j| distance(&points[from], &points[j])).sum();
    sum / to.len() as f64
}

/// Mean silhouette over all points, Euclidean distance. Points alone in
/// their cluster score 0.
pub fn silhouette(points: &[Vec<f64>], assignment: &[usize]) -> Option<f64> {
    let groups = groups(assignment);
    if groups.len() < 2 || points.len() != assignment.len() {
        return None;
    }
    let mut total = 0.0;
    for (g, members) in groups.iter().enumerate() {
        for &i in members {
            if members.len() == 1 {
                continue;
            }
            let others: Vec<usize> = members.iter().copied().filter(|&j| j != i).collect();
            let a = mean_distance(points, i, &others);
            let b = groups
                .iter()
                .enumerate()
                .filter(|(h, _)| *h != g)
                .map(|(_, other)| mean_distance(points, i, other))
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom > 0.0 {
                total += (b - a) / denom;
            }
        }
    }
    Some(total / points.len() as f64)
}

/// Davies-Bouldin index with mean member-to-centroid scatter.
pub fn davies_bouldin(points: &[Vec<f64>], assignment: &[usize]) -> Option<f64> {
    let groups = groups(assignment);
    if groups.len() < 2 || points.len() != assignment.len() {
        return None;
    }
    let dim = points[0].len();
    let centroids: Vec<Vec<f64>> = groups
        .iter()
        .map(|members| {
            let mut c = vec![0.0; dim];
            for &i in members {
                for (acc, x) in c.iter_mut().zip(&points[i]) {
                    *acc += x;
                }
            }
            c.iter().map(|x| x / members.len() as f64).collect()
        })
        .collect();
    let scatter: Vec<f64> = groups
        .iter()
        .zip(&centroids)
        .map(|(members, c)| members.iter().map(|&i| distance(&points[i], c)).sum::<f64>() / members.len() as f64)
        .collect();
    let n = groups.len();
    let mut total = 0.0;
    for i in 0..n {
        let worst = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let spread = scatter[i] + scatter[j];
                let separation = distance(&centroids[i], &centroids[j]);
                if spread == 0.0 {
                    0.0
                } else if separation == 0.0 {
                    f64::INFINITY
                } else {
                    spread / separation
                }
            })
            .fold(0.0, f64::max);
        total += worst;
    }
    Some(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook silhouette written independently: explicit loops over all
    /// pairs, no shared helpers.
    fn silhouette_oracle(points: &[f64], labels: &[usize]) -> f64 {
        let n = points.len();
        let mut s = 0.0;
        for i in 0..n {
            let same: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
            if same.is_empty() {
                continue;
            }
            let a = same.iter().map(|&j| (points[i] - points[j]).abs()).sum::<f64>() / same.len() as f64;
            let mut b = f64::INFINITY;
            let mut other_labels: Vec<usize> = labels.iter().copied().filter(|&l| l != labels[i]).collect();
            other_labels.sort();
            other_labels.dedup();
            for l in other_labels {
                let members: Vec<usize> = (0..n).filter(|&j| labels[j] == l).collect();
                let d = members.iter().map(|&j| (points[i] - points[j]).abs()).sum::<f64>() / members.len() as f64;
                b = b.min(d);
            }
            s += (b - a) / a.max(b);
        }
        s / n as f64
    }

    #[test]
    fn separated_duplicate_pairs() {
        let points = vec![vec![0.0], vec![0.0], vec![10.0], vec![10.0]];
        let report = cluster_metrics(&points, &[0, 0, 1, 1]);
        assert!((report.silhouette.unwrap() - 1.0).abs() < 1e-9);
        assert!(report.davies_bouldin.unwrap().abs() < 1e-9);
    }

    #[test]
    fn single_cluster_is_undefined() {
        let points = vec![vec![0.0], vec![1.0]];
        let report = cluster_metrics(&points, &[0, 0]);
        assert_eq!(report.silhouette, None);
        assert_eq!(report.davies_bouldin, None);
        let json = serde_json::to_value(&report).unwrap();
        assert!(json["silhouette"].is_null());
    }

    #[test]
    fn matches_oracle_on_uneven_clusters() {
        let xs = [0.0, 1.0, 2.5, 7.0, 8.0, 20.0];
        let labels = [0, 0, 0, 1, 1, 2];
        let points: Vec<Vec<f64>> = xs.iter().map(|x| vec![*x]).collect();
        let got = silhouette(&points, &labels).unwrap();
        assert!((got - silhouette_oracle(&xs, &labels)).abs() < 1e-12);
    }

    #[test]
    fn davies_bouldin_hand_value() {
        // Clusters {0,2} and {10,12}: scatter 1 each, centroids 1 and 11.
        let points = vec![vec![0.0], vec![2.0], vec![10.0], vec![12.0]];
        let db = davies_bouldin(&points, &[0, 0, 1, 1]).unwrap();
        assert!((db - 0.2).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn ranges_hold(
                data in proptest::collection::vec((proptest::collection::vec(-3.0f64..3.0, 2), 0usize..4), 2..30)
            ) {
                let points: Vec<Vec<f64>> = data.iter().map(|(p, _)| p.clone()).collect();
                let labels: Vec<usize> = data.iter().map(|(_, l)| *l).collect();
                let report = cluster_metrics(&points, &labels);
                if let Some(s) = report.silhouette {
                    prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s));
                }
                if let Some(db) = report.davies_bouldin {
                    prop_assert!(db >= 0.0);
                }
            }
        }
    }
}
