//! Cluster-validity indices over labelled embeddings.

use std::collections::BTreeMap;

use crate::error::{MixcoError, Result};
use crate::numerics::Tensor;

/// An index value; `degenerate` marks a guarded division (value `+∞`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterIndex {
    pub value: f64,
    pub degenerate: bool,
}

struct Clusters {
    members: Vec<Vec<usize>>,
    centroids: Vec<Vec<f64>>,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn group(embeddings: &Tensor, labels: &[usize], op: &'static str) -> Result<Clusters> {
    let (n, dim) = embeddings.expect_matrix(op)?;
    if labels.len() != n {
        return Err(MixcoError::Dimension {
            op,
            left: embeddings.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    if by_label.len() < 2 {
        return Err(MixcoError::config(format!(
            "{op} needs at least 2 clusters, got {}",
            by_label.len()
        )));
    }
    let members: Vec<Vec<usize>> = by_label.into_values().collect();
    let centroids = members
        .iter()
        .map(|idx| {
            let mut c = vec![0.0; dim];
            for &i in idx {
                for (cj, x) in c.iter_mut().zip(embeddings.row(i)) {
                    *cj += x;
                }
            }
            c.iter_mut().for_each(|v| *v /= idx.len() as f64);
            c
        })
        .collect();
    Ok(Clusters { members, centroids })
}

/// Mean over clusters of `max_{j≠i} (s_i + s_j) / d(c_i, c_j)`, where `s` is
/// the mean distance of a cluster's members to its centroid. Lower is better.
pub fn davies_bouldin(embeddings: &Tensor, labels: &[usize]) -> Result<ClusterIndex> {
    let cl = group(embeddings, labels, "davies_bouldin")?;
    let scatter: Vec<f64> = cl
        .members
        .iter()
        .zip(&cl.centroids)
        .map(|(idx, c)| idx.iter().map(|&i| distance(embeddings.row(i), c)).sum::<f64>() / idx.len() as f64)
        .collect();
    let k = cl.members.len();
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = 0.0f64;
        for j in (0..k).filter(|&j| j != i) {
            let d = distance(&cl.centroids[i], &cl.centroids[j]);
            if d == 0.0 {
                return Ok(ClusterIndex {
                    value: f64::INFINITY,
                    degenerate: true,
                });
            }
            worst = worst.max((scatter[i] + scatter[j]) / d);
        }
        total += worst;
    }
    Ok(ClusterIndex {
        value: total / k as f64,
        degenerate: false,
    })
}

/// `[B / (k − 1)] / [W / (N − k)]` with `B` the size-weighted squared spread
/// of centroids around the grand mean and `W` the within-cluster sum of
/// squares. Higher is better.
pub fn calinski_harabasz(embeddings: &Tensor, labels: &[usize]) -> Result<ClusterIndex> {
    let cl = group(embeddings, labels, "calinski_harabasz")?;
    let n = embeddings.rows();
    let k = cl.members.len();
    if k >= n {
        return Err(MixcoError::config(format!(
            "calinski_harabasz needs fewer clusters than samples, got {k} clusters for {n} samples"
        )));
    }
    let dim = embeddings.cols();
    let mut mean = vec![0.0; dim];
    for row in embeddings.row_iter() {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);

    let mut between = 0.0;
    let mut within = 0.0;
    for (idx, c) in cl.members.iter().zip(&cl.centroids) {
        between += idx.len() as f64 * distance(c, &mean).powi(2);
        for &i in idx {
            within += distance(embeddings.row(i), c).powi(2);
        }
    }
    if within == 0.0 {
        return Ok(ClusterIndex {
            value: f64::INFINITY,
            degenerate: true,
        });
    }
    Ok(ClusterIndex {
        value: (between / (k - 1) as f64) / (within / (n - k) as f64),
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singletons_have_zero_db() {
        let x = Tensor::from_rows(&[[0.0, 0.0], [3.0, 4.0]]).unwrap();
        let db = davies_bouldin(&x, &[0, 1]).unwrap();
        assert_eq!(db.value, 0.0);
        assert!(!db.degenerate);
    }

    #[test]
    fn coincident_centroids_flagged() {
        let x = Tensor::from_rows(&[[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]).unwrap();
        let db = davies_bouldin(&x, &[0, 0, 1, 1]).unwrap();
        assert!(db.degenerate && db.value.is_infinite());
    }

    #[test]
    fn zero_within_flagged() {
        let x = Tensor::from_rows(&[[0.0], [0.0], [1.0], [1.0]]).unwrap();
        let ch = calinski_harabasz(&x, &[0, 0, 1, 1]).unwrap();
        assert!(ch.degenerate && ch.value.is_infinite());
    }

    #[test]
    fn needs_two_clusters() {
        let x = Tensor::from_rows(&[[0.0], [1.0]]).unwrap();
        assert!(davies_bouldin(&x, &[3, 3]).is_err());
        assert!(calinski_harabasz(&x, &[0, 1]).is_err());
    }

    #[test]
    fn translation_and_scale_invariance() {
        let x = Tensor::from_rows(&[[0.0, 0.1], [0.2, -0.1], [2.0, 2.0], [2.3, 1.8], [4.0, -1.0], [4.2, -0.7]])
            .unwrap();
        let labels = [0, 0, 1, 1, 2, 2];
        let db = davies_bouldin(&x, &labels).unwrap().value;
        let ch = calinski_harabasz(&x, &labels).unwrap().value;
        let moved = x.map(|v| v + 1000.0);
        assert!((davies_bouldin(&moved, &labels).unwrap().value - db).abs() < 1e-9);
        let scaled = x.scale(7.5);
        assert!((calinski_harabasz(&scaled, &labels).unwrap().value - ch).abs() < 1e-9 * ch);
    }
}
