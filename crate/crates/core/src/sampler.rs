//! Active selection of proxy samples to send to the teacher.
//!
//! Active pool samples are embedded with the current student, grouped by the
//! argmax of their current pseudo-label, and each gets an RBF score
//!
//! ```text
//! p = exp(-Δ(z, μ) / (2σ²))
//! ```
//!
//! where `μ` is the nearest class centroid and `Δ` the squared Euclidean
//! distance by default. A batch is then drawn with an equal quota per
//! non-empty cluster, sampling without replacement proportionally to `p`
//! inside each cluster. Outliers far from every centroid are rarely picked.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ProxyPool;
use crate::linalg::squared_distance;
use crate::nn::{Network, NnError};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("no class has a defined centroid")]
    NoCentroids,
    #[error("requested {requested} samples but only {available} are active")]
    CountExceedsPool { requested: usize, available: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Network(#[from] NnError),
}

pub type Result<T, E = SamplerError> = std::result::Result<T, E>;

/// Distance fed into the RBF.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RbfDistance {
    #[default]
    SquaredEuclidean,
    Euclidean,
}

/// Which centroid a sample is scored against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentroidChoice {
    /// The closest defined centroid.
    #[default]
    Nearest,
    /// A defined class drawn uniformly at random per sample.
    UniformClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub sigma: f64,
    pub distance: RbfDistance,
    pub centroid: CentroidChoice,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            sigma: 17.0,
            distance: RbfDistance::SquaredEuclidean,
            centroid: CentroidChoice::Nearest,
        }
    }
}

/// Per-class latent means.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    centroids: Vec<Option<Vec<f64>>>,
    counts: Vec<usize>,
}

impl CentroidSet {
    /// `None` for classes with no members.
    pub fn centroid(&self, class: usize) -> Option<&[f64]> {
        self.centroids[class].as_deref()
    }

    pub fn count(&self, class: usize) -> usize {
        self.counts[class]
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn defined_classes(&self) -> Vec<usize> {
        (0..self.counts.len()).filter(|&c| self.counts[c] > 0).collect()
    }

    /// Nearest defined centroid by squared Euclidean distance, ties to the
    /// lowest class. Returns `(class, squared distance)`.
    pub fn nearest(&self, latent: &[f64]) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (class, centroid) in self.centroids.iter().enumerate() {
            if let Some(mu) = centroid {
                let d = squared_distance(latent, mu);
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((class, d));
                }
            }
        }
        best
    }
}

/// Mean latent per class.
pub fn compute_centroids(latents: &[Vec<f64>], assignments: &[usize], num_classes: usize) -> Result<CentroidSet> {
    if latents.len() != assignments.len() {
        return Err(SamplerError::InvalidInput(format!(
            "{} latents but {} assignments",
            latents.len(),
            assignments.len()
        )));
    }
    let dim = latents.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; dim]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (z, &c) in latents.iter().zip(assignments) {
        if c >= num_classes {
            return Err(SamplerError::InvalidInput(format!("class {c} out of range")));
        }
        if z.len() != dim {
            return Err(SamplerError::InvalidInput("latents differ in dimension".into()));
        }
        for (s, v) in sums[c].iter_mut().zip(z) {
            *s += v;
        }
        counts[c] += 1;
    }
    let centroids = sums
        .into_iter()
        .zip(&counts)
        .map(|(sum, &n)| (n > 0).then(|| sum.into_iter().map(|s| s / n as f64).collect()))
        .collect();
    Ok(CentroidSet { centroids, counts })
}

/// `exp(-distance / (2σ²))`, kept strictly positive.
pub fn rbf_probability(distance: f64, sigma: f64) -> f64 {
    (-distance / (2.0 * sigma * sigma)).exp().max(f64::MIN_POSITIVE)
}

/// Sampling probability of a latent against its nearest centroid, using the
/// squared Euclidean distance.
pub fn sampling_probability(latent: &[f64], centroids: &CentroidSet, sigma: f64) -> Result<f64> {
    let (_, d2) = centroids.nearest(latent).ok_or(SamplerError::NoCentroids)?;
    Ok(rbf_probability(d2, sigma))
}

/// Scores for every active pool sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingPlan {
    pub pool_indices: Vec<usize>,
    pub probabilities: Vec<f64>,
    /// Cluster (pseudo-label argmax) each sample is drawn from.
    pub class_of: Vec<usize>,
    pub num_classes: usize,
}

/// Scores already-computed latents. `latents[i]` belongs to `pool_indices[i]`.
pub fn plan_from_latents<R: Rng + ?Sized>(
    pool_indices: Vec<usize>,
    latents: &[Vec<f64>],
    class_of: Vec<usize>,
    num_classes: usize,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<SamplingPlan> {
    let centroids = compute_centroids(latents, &class_of, num_classes)?;
    let defined = centroids.defined_classes();
    if defined.is_empty() {
        return Err(SamplerError::NoCentroids);
    }
    let mut probabilities = Vec::with_capacity(latents.len());
    for z in latents {
        let d2 = match cfg.centroid {
            CentroidChoice::Nearest => centroids.nearest(z).expect("defined centroid exists").1,
            CentroidChoice::UniformClass => {
                let c = defined[rng.random_range(0..defined.len())];
                squared_distance(z, centroids.centroid(c).expect("class is defined"))
            }
        };
        let d = match cfg.distance {
            RbfDistance::SquaredEuclidean => d2,
            RbfDistance::Euclidean => d2.sqrt(),
        };
        probabilities.push(rbf_probability(d, cfg.sigma));
    }
    Ok(SamplingPlan {
        pool_indices,
        probabilities,
        class_of,
        num_classes,
    })
}

/// Embeds every active pool sample with `student` and scores it.
pub fn build_plan<R: Rng + ?Sized>(
    pool: &ProxyPool,
    student: &Network,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<SamplingPlan> {
    let indices = pool.active_indices();
    let latents = indices
        .iter()
        .map(|&i| student.latent(&pool.features[i]))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let class_of = indices.iter().map(|&i| pool.cluster_key(i)).collect();
    plan_from_latents(indices, &latents, class_of, pool.num_classes, cfg, rng)
}

/// Splits `count` across clusters of the given sizes as evenly as possible.
///
/// Quota is handed out one sample per non-full cluster per pass, visiting
/// clusters from largest to smallest (lowest class first on equal size), so
/// unsaturated clusters never differ by more than one.
pub fn allocate_quotas(sizes: &[usize], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..sizes.len()).filter(|&c| sizes[c] > 0).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    let mut quota = vec![0usize; sizes.len()];
    let mut left = count;
    while left > 0 {
        let open: Vec<usize> = order.iter().copied().filter(|&c| quota[c] < sizes[c]).collect();
        if open.is_empty() {
            break;
        }
        // Whole passes at once, then a final partial pass.
        let cap = open.iter().map(|&c| sizes[c] - quota[c]).min().unwrap_or(0);
        let passes = (left / open.len()).min(cap);
        if passes > 0 {
            for &c in &open {
                quota[c] += passes;
            }
            left -= passes * open.len();
        } else {
            for &c in open.iter().take(left) {
                quota[c] += 1;
            }
            left = 0;
        }
    }
    quota
}

/// Draws `count` distinct positions with probability proportional to
/// `weights`, one at a time without replacement.
pub fn weighted_draw_without_replacement<R: Rng + ?Sized>(weights: &[f64], count: usize, rng: &mut R) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..weights.len()).collect();
    let mut picked = Vec::with_capacity(count.min(weights.len()));
    while picked.len() < count && !remaining.is_empty() {
        let total: f64 = remaining.iter().map(|&i| weights[i]).sum();
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = remaining.len() - 1;
        for (slot, &i) in remaining.iter().enumerate() {
            acc += weights[i];
            if target < acc {
                chosen = slot;
                break;
            }
        }
        picked.push(remaining.remove(chosen));
    }
    picked
}

/// Draws a stratified batch from a plan; returns pool indices.
pub fn select_from_plan<R: Rng + ?Sized>(plan: &SamplingPlan, count: usize, rng: &mut R) -> Result<Vec<usize>> {
    if count > plan.pool_indices.len() {
        return Err(SamplerError::CountExceedsPool {
            requested: count,
            available: plan.pool_indices.len(),
        });
    }
    let mut members = vec![Vec::new(); plan.num_classes];
    for (slot, &c) in plan.class_of.iter().enumerate() {
        members[c].push(slot);
    }
    let sizes: Vec<usize> = members.iter().map(Vec::len).collect();
    let quotas = allocate_quotas(&sizes, count);
    let mut selected = Vec::with_capacity(count);
    for (slots, &quota) in members.iter().zip(&quotas) {
        if quota == 0 {
            continue;
        }
        let weights: Vec<f64> = slots.iter().map(|&s| plan.probabilities[s]).collect();
        for pick in weighted_draw_without_replacement(&weights, quota, rng) {
            selected.push(plan.pool_indices[slots[pick]]);
        }
    }
    Ok(selected)
}

/// Picks `count` active pool samples to query.
pub fn select_batch<R: Rng + ?Sized>(
    pool: &ProxyPool,
    student: &Network,
    cfg: &SamplerConfig,
    count: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let available = pool.active_count();
    if count > available {
        return Err(SamplerError::CountExceedsPool {
            requested: count,
            available,
        });
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let plan = build_plan(pool, student, cfg, rng)?;
    select_from_plan(&plan, count, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetworkSpec;
    use crate::seeded_rng;

    #[test]
    fn centroid_examples() {
        let set = compute_centroids(&[vec![0.0, 0.0], vec![2.0, 2.0], vec![5.0, 1.0]], &[0, 0, 2], 3).unwrap();
        assert_eq!(set.centroid(0), Some(&[1.0, 1.0][..]));
        assert_eq!(set.centroid(1), None);
        assert_eq!(set.centroid(2), Some(&[5.0, 1.0][..]));
        assert_eq!((set.count(0), set.count(1), set.count(2)), (2, 0, 1));
        assert_eq!(set.defined_classes(), vec![0, 2]);
        assert!(compute_centroids(&[vec![0.0]], &[3], 3).is_err());
    }

    #[test]
    fn probability_point_checks() {
        let set = compute_centroids(&[vec![3.0, 4.0]], &[0], 2).unwrap();
        assert_eq!(sampling_probability(&[3.0, 4.0], &set, 17.0).unwrap(), 1.0);
        // Squared distance 578 = 2 · 17².
        let p = sampling_probability(&[3.0 + 578f64.sqrt(), 4.0], &set, 17.0).unwrap();
        assert!((p - (-1.0f64).exp()).abs() < 1e-12);
        let empty = compute_centroids(&[], &[], 2).unwrap();
        assert!(matches!(sampling_probability(&[0.0], &empty, 1.0), Err(SamplerError::NoCentroids)));
    }

    #[test]
    fn quota_examples() {
        assert_eq!(allocate_quotas(&[5, 5], 2), vec![1, 1]);
        assert_eq!(allocate_quotas(&[3, 7, 0, 5], 4), vec![1, 2, 0, 1]);
        // Cluster 0 can only hold one; its unused share is handed out round-robin.
        assert_eq!(allocate_quotas(&[1, 6, 4], 9), vec![1, 4, 4]);
        assert_eq!(allocate_quotas(&[2, 3], 5), vec![2, 3]);
        assert_eq!(allocate_quotas(&[0, 0], 0), vec![0, 0]);
    }

    #[test]
    fn weighted_draw_matches_probabilities() {
        let mut rng = seeded_rng(10);
        let trials = 10_000;
        let hits = (0..trials)
            .filter(|_| weighted_draw_without_replacement(&[0.9, 0.05, 0.05], 1, &mut rng)[0] == 0)
            .count();
        let rate = hits as f64 / trials as f64;
        assert!((rate - 0.9).abs() < 0.02, "rate {rate}");
    }

    fn tiny_pool() -> ProxyPool {
        let features = vec![
            vec![0.0, 0.1],
            vec![0.2, 0.0],
            vec![5.0, 5.0],
            vec![5.1, 4.9],
            vec![4.8, 5.2],
        ];
        ProxyPool::new(features, vec![0, 0, 1, 1, 1], 2)
    }

    fn identity_student() -> Network {
        let mut net = Network::zeros(NetworkSpec::new(2, vec![2], 2).unwrap()).unwrap();
        net.layers_mut()[0].weights = vec![1.0, 0.0, 0.0, 1.0];
        net
    }

    #[test]
    fn two_clusters_one_each() {
        let pool = tiny_pool();
        let mut rng = seeded_rng(3);
        for _ in 0..50 {
            let picked = select_batch(&pool, &identity_student(), &SamplerConfig::default(), 2, &mut rng).unwrap();
            let classes: Vec<usize> = picked.iter().map(|&i| pool.provenance_class[i]).collect();
            assert_eq!(classes, vec![0, 1]);
        }
    }

    #[test]
    fn saturating_count_returns_all_active() {
        let mut pool = tiny_pool();
        pool.promote(2);
        let mut picked = select_batch(&pool, &identity_student(), &SamplerConfig::default(), 4, &mut seeded_rng(1)).unwrap();
        picked.sort_unstable();
        assert_eq!(picked, vec![0, 1, 3, 4]);
        assert!(matches!(
            select_batch(&pool, &identity_student(), &SamplerConfig::default(), 5, &mut seeded_rng(1)),
            Err(SamplerError::CountExceedsPool { requested: 5, available: 4 })
        ));
    }

    #[test]
    fn uniform_class_variant_scores_every_sample() {
        let pool = tiny_pool();
        let cfg = SamplerConfig {
            centroid: CentroidChoice::UniformClass,
            sigma: 1.0,
            ..SamplerConfig::default()
        };
        let plan = build_plan(&pool, &identity_student(), &cfg, &mut seeded_rng(2)).unwrap();
        assert_eq!(plan.probabilities.len(), 5);
        assert!(plan.probabilities.iter().all(|&p| p > 0.0 && p <= 1.0));
    }

    #[test]
    fn plain_euclidean_variant() {
        let latents = vec![vec![0.0, 0.0], vec![2.0, 0.0]];
        let cfg = SamplerConfig {
            distance: RbfDistance::Euclidean,
            sigma: 1.0,
            ..SamplerConfig::default()
        };
        let plan = plan_from_latents(vec![0, 1], &latents, vec![0, 0], 1, &cfg, &mut seeded_rng(0)).unwrap();
        // Centroid (1, 0); Euclidean distance 1 for both.
        for p in plan.probabilities {
            assert!((p - (-0.5f64).exp()).abs() < 1e-15);
        }
    }
}
