//! Self-paced pseudo-labeling by exact kNN in the student's latent space.
//!
//! Soft mode averages the neighbors' teacher distributions with weights
//! `max(1 - d, 0)` (cosine distance by default); hard mode takes a plurality
//! vote, breaking ties by the smallest summed distance and then the lowest
//! class index.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aspkd::LabeledProxySet;
use crate::data::ProxyPool;
use crate::linalg::{dot, norm, one_hot, squared_distance};
use crate::nn::{Network, NnError};
use crate::oracle::LabelMode;

#[derive(Debug, Error)]
pub enum PseudoLabelError {
    #[error("the labeled set is empty")]
    EmptyLabeledSet,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("k must be >= 1")]
    ZeroK,
    #[error(transparent)]
    Network(#[from] NnError),
}

pub type Result<T, E = PseudoLabelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    Euclidean,
    Cosine,
}

impl DistanceMetric {
    /// Cosine for soft labels, Euclidean for hard labels.
    pub fn default_for(mode: LabelMode) -> Self {
        match mode {
            LabelMode::Soft => Self::Cosine,
            LabelMode::Hard => Self::Euclidean,
        }
    }

    pub fn distance(self, u: &[f64], v: &[f64]) -> Result<f64> {
        match self {
            Self::Euclidean => euclidean_distance(u, v),
            Self::Cosine => cosine_distance(u, v),
        }
    }
}

impl std::str::FromStr for DistanceMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "euclidean" => Ok(Self::Euclidean),
            "cosine" => Ok(Self::Cosine),
            other => Err(format!("unknown metric {other:?} (expected euclidean|cosine)")),
        }
    }
}

/// Neighbor weighting for soft pseudo-labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborWeighting {
    /// `max(1 - d, 0)`.
    #[default]
    OneMinusDistance,
    /// `1 / (d + 1e-12)`.
    InverseDistance,
}

const NORM_FLOOR: f64 = 1e-12;

fn check_dims(u: &[f64], v: &[f64]) -> Result<()> {
    if u.len() != v.len() {
        return Err(PseudoLabelError::DimensionMismatch(u.len(), v.len()));
    }
    Ok(())
}

/// `1 - ⟨u,v⟩ / (max(‖u‖,ε) · max(‖v‖,ε))`, clamped to `[0, 2]`; 1 when both
/// vectors are (numerically) zero.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    check_dims(u, v)?;
    let (nu, nv) = (norm(u), norm(v));
    if nu < NORM_FLOOR && nv < NORM_FLOOR {
        return Ok(1.0);
    }
    let sim = dot(u, v) / (nu.max(NORM_FLOOR) * nv.max(NORM_FLOOR));
    Ok((1.0 - sim).clamp(0.0, 2.0))
}

pub fn euclidean_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    check_dims(u, v)?;
    Ok(squared_distance(u, v).sqrt())
}

/// The k nearest labeled samples, nearest first.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborList {
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
}

impl NeighborList {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Exact brute-force kNN. Ties in distance go to the lower index.
pub fn knn<V: AsRef<[f64]>>(query: &[f64], labeled: &[V], k: usize, metric: DistanceMetric) -> Result<NeighborList> {
    if labeled.is_empty() {
        return Err(PseudoLabelError::EmptyLabeledSet);
    }
    if k == 0 {
        return Err(PseudoLabelError::ZeroK);
    }
    let mut scored = labeled
        .iter()
        .enumerate()
        .map(|(j, v)| Ok((metric.distance(query, v.as_ref())?, j)))
        .collect::<Result<Vec<(f64, usize)>>>()?;
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.truncate(k);
    let (distances, indices) = scored.into_iter().unzip();
    Ok(NeighborList { indices, distances })
}

/// Weighted average of neighbor distributions. `labels[j]` belongs to
/// `neighbors.indices[j]`. Falls back to equal weights when every weight is 0.
pub fn soft_pseudo_label<L: AsRef<[f64]>>(neighbors: &NeighborList, labels: &[L], weighting: NeighborWeighting) -> Vec<f64> {
    let weights: Vec<f64> = neighbors
        .distances
        .iter()
        .map(|&d| match weighting {
            NeighborWeighting::OneMinusDistance => (1.0 - d).max(0.0),
            NeighborWeighting::InverseDistance => 1.0 / (d + NORM_FLOOR),
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let uniform = 1.0 / weights.len() as f64;
    let dim = labels.first().map_or(0, |l| l.as_ref().len());
    let mut out = vec![0.0; dim];
    for (w, label) in weights.iter().zip(labels) {
        let w = if total > 0.0 { w / total } else { uniform };
        for (o, p) in out.iter_mut().zip(label.as_ref()) {
            *o += w * p;
        }
    }
    let mass: f64 = out.iter().sum();
    if mass > 0.0 {
        out.iter_mut().for_each(|v| *v /= mass);
    }
    out
}

/// Plurality vote; ties by smallest summed distance, then lowest class.
/// `labels[j]` is the class of `neighbors.indices[j]`.
pub fn hard_pseudo_label(neighbors: &NeighborList, labels: &[usize], num_classes: usize) -> usize {
    let mut votes = vec![0usize; num_classes];
    let mut summed = vec![0.0f64; num_classes];
    for (&c, &d) in labels.iter().zip(&neighbors.distances) {
        votes[c] += 1;
        summed[c] += d;
    }
    (0..num_classes)
        .filter(|&c| votes[c] > 0)
        .min_by(|&a, &b| {
            votes[b]
                .cmp(&votes[a])
                .then(summed[a].total_cmp(&summed[b]))
                .then(a.cmp(&b))
        })
        .unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabelConfig {
    pub k: usize,
    pub metric: DistanceMetric,
    pub mode: LabelMode,
    pub weighting: NeighborWeighting,
}

/// Overwrites the pseudo-label of every active pool sample from its k nearest
/// teacher-labeled samples. Promoted samples are left untouched.
pub fn pseudo_label_pool(
    pool: &mut ProxyPool,
    labeled: &LabeledProxySet,
    student: &Network,
    cfg: &PseudoLabelConfig,
) -> Result<()> {
    if labeled.is_empty() {
        return Err(PseudoLabelError::EmptyLabeledSet);
    }
    let labeled_latents = labeled
        .samples
        .iter()
        .map(|x| student.latent(x))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let num_classes = pool.num_classes;
    let classes: Vec<usize> = labeled.responses.iter().map(|r| r.class()).collect();
    for i in pool.active_indices() {
        let z = student.latent(&pool.features[i])?;
        let neighbors = knn(&z, &labeled_latents, cfg.k, cfg.metric)?;
        pool.pseudo_label[i] = match cfg.mode {
            LabelMode::Soft => {
                let labels: Vec<&[f64]> = neighbors.indices.iter().map(|&j| labeled.targets[j].as_slice()).collect();
                soft_pseudo_label(&neighbors, &labels, cfg.weighting)
            }
            LabelMode::Hard => {
                let labels: Vec<usize> = neighbors.indices.iter().map(|&j| classes[j]).collect();
                one_hot(hard_pseudo_label(&neighbors, &labels, num_classes), num_classes)
            }
        };
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert!(cosine_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap().abs() < 1e-15);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_distance(&[1.0, -2.0], &[-1.0, 2.0]).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(cosine_distance(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert!(cosine_distance(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn euclidean_examples() {
        assert_eq!(euclidean_distance(&[1.5, 2.0], &[1.5, 2.0]).unwrap(), 0.0);
        assert_eq!(euclidean_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert!(euclidean_distance(&[0.0], &[3.0, 4.0]).is_err());
    }

    #[test]
    fn knn_examples() {
        let labeled = vec![vec![5.0], vec![1.0], vec![3.0], vec![1.0]];
        let nl = knn(&[0.0], &labeled, 1, DistanceMetric::Euclidean).unwrap();
        assert_eq!(nl.indices, vec![1]);
        let nl = knn(&[0.0], &labeled, 10, DistanceMetric::Euclidean).unwrap();
        assert_eq!(nl.indices, vec![1, 3, 2, 0]);
        assert_eq!(nl.distances, vec![1.0, 1.0, 3.0, 5.0]);
        let empty: Vec<Vec<f64>> = Vec::new();
        assert!(matches!(knn(&[0.0], &empty, 1, DistanceMetric::Euclidean), Err(PseudoLabelError::EmptyLabeledSet)));
    }

    #[test]
    fn soft_label_examples() {
        let p = vec![0.2, 0.3, 0.5];
        let nl = NeighborList { indices: vec![0, 1, 2], distances: vec![0.1, 0.4, 0.9] };
        let out = soft_pseudo_label(&nl, &[&p, &p, &p], NeighborWeighting::OneMinusDistance);
        for (a, b) in out.iter().zip(&p) {
            assert!((a - b).abs() < 1e-15);
        }
        let (a, b) = (vec![1.0, 0.0], vec![0.0, 1.0]);
        let nl = NeighborList { indices: vec![0, 1], distances: vec![0.0, 1.0] };
        assert_eq!(soft_pseudo_label(&nl, &[&a, &b], NeighborWeighting::OneMinusDistance), vec![1.0, 0.0]);
        let nl = NeighborList { indices: vec![0, 1], distances: vec![0.3, 0.3] };
        assert_eq!(soft_pseudo_label(&nl, &[&a, &b], NeighborWeighting::OneMinusDistance), vec![0.5, 0.5]);
        // Every weight clamps to zero: fall back to equal weights.
        let nl = NeighborList { indices: vec![0, 1], distances: vec![1.5, 1.2] };
        assert_eq!(soft_pseudo_label(&nl, &[&a, &b], NeighborWeighting::OneMinusDistance), vec![0.5, 0.5]);
        let nl = NeighborList { indices: vec![0, 1], distances: vec![1.0, 3.0] };
        let inv = soft_pseudo_label(&nl, &[&a, &b], NeighborWeighting::InverseDistance);
        assert!((inv[0] - 0.75).abs() < 1e-9);
    }

    #[test]
    fn hard_label_examples() {
        let nl = NeighborList { indices: (0..5).collect(), distances: vec![0.1, 0.2, 0.3, 0.4, 0.5] };
        assert_eq!(hard_pseudo_label(&nl, &[0, 0, 0, 1, 1], 2), 0);
        assert_eq!(hard_pseudo_label(&nl, &[1, 0, 1, 0, 0], 2), 0);
        // Two votes each: A sums 0.1 + 0.2, B sums 0.3 + 0.4.
        let nl = NeighborList { indices: (0..4).collect(), distances: vec![0.1, 0.3, 0.2, 0.4] };
        assert_eq!(hard_pseudo_label(&nl, &[0, 1, 0, 1], 2), 0);
        assert_eq!(hard_pseudo_label(&nl, &[1, 0, 1, 0], 2), 1);
        // Same votes and same summed distance: lowest class.
        let nl = NeighborList { indices: (0..2).collect(), distances: vec![0.5, 0.5] };
        assert_eq!(hard_pseudo_label(&nl, &[2, 1], 3), 1);
        let nl = NeighborList { indices: vec![0], distances: vec![0.7] };
        assert_eq!(hard_pseudo_label(&nl, &[2], 3), 2);
    }
}
