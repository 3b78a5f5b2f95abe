//! Dense feed-forward classifier.
//!
//! A network is a chain of affine layers. Every hidden layer is followed by a
//! ReLU; the last layer emits raw logits. The post-activation output of the
//! final hidden layer is the *latent* representation that the attack's
//! sampler and pseudo-labeler operate on.
//!
//! Weights are stored row-major with shape `(fan_out, fan_in)`.

mod adam;
mod backprop;
mod checkpoint;
mod schedule;
mod train;

pub use adam::AdamState;
pub use backprop::{backward, Gradients, LayerGradients};
pub use schedule::step_decay_lr;
pub use train::{
    train_until_convergence, EpochRecord, TrainConfig, TrainHistory, TrainingSet,
};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::argmax;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("non-finite parameter in layer {layer}")]
    NonFinite { layer: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden_sizes: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl NetworkSpec {
    pub fn new(input_dim: usize, hidden_sizes: Vec<usize>, num_classes: usize) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden_sizes,
            num_classes,
            activation: Activation::Relu,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Default teacher shape: two hidden layers of 64 and 32 units.
    pub fn teacher(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden_sizes: vec![64, 32],
            num_classes,
            activation: Activation::Relu,
        }
    }

    /// Default student shape: the teacher at half width.
    pub fn student(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden_sizes: vec![32, 16],
            num_classes,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(NnError::InvalidSpec("input_dim must be >= 1".into()));
        }
        if self.hidden_sizes.is_empty() {
            return Err(NnError::InvalidSpec("at least one hidden layer is required".into()));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(NnError::InvalidSpec("hidden sizes must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(NnError::InvalidSpec("num_classes must be >= 2".into()));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        *self.hidden_sizes.last().expect("validated spec has a hidden layer")
    }

    /// `(fan_in, fan_out)` for every layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_sizes.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_sizes);
        dims.push(self.num_classes);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Row-major `(fan_out, fan_in)`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            fan_in,
            fan_out,
            weights: vec![0.0; fan_in * fan_out],
            biases: vec![0.0; fan_out],
        }
    }

    #[inline]
    pub(crate) fn affine_into(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (row, bias) in self.weights.chunks_exact(self.fan_in).zip(&self.biases) {
            let mut acc = *bias;
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            out.push(acc);
        }
    }
}

/// Output of a single forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    pub logits: Vec<f64>,
    /// Post-activation output of the final hidden layer.
    pub latent: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "checkpoint::CheckpointDoc", into = "checkpoint::CheckpointDoc")]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Layer>,
}

impl Network {
    /// All weights and biases zero.
    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(i, o)| Layer::zeros(i, o))
            .collect();
        Ok(Self { spec, layers })
    }

    /// Xavier/Glorot normal initialization: every weight is drawn from
    /// `N(0, 2 / (fan_in + fan_out))`, biases start at zero.
    pub fn xavier_init<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        for layer in &mut net.layers {
            let std_dev = (2.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            let normal = Normal::new(0.0, std_dev).expect("finite positive std");
            for w in &mut layer.weights {
                *w = normal.sample(rng);
            }
        }
        Ok(net)
    }

    /// Builds a network from explicit layers, checking shapes and finiteness.
    pub fn from_layers(spec: NetworkSpec, layers: Vec<Layer>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(NnError::InvalidSpec(format!(
                "expected {} layers, got {}",
                shapes.len(),
                layers.len()
            )));
        }
        for (idx, ((fan_in, fan_out), layer)) in shapes.iter().zip(&layers).enumerate() {
            if layer.fan_in != *fan_in
                || layer.fan_out != *fan_out
                || layer.weights.len() != fan_in * fan_out
                || layer.biases.len() != *fan_out
            {
                return Err(NnError::InvalidSpec(format!("layer {idx} has inconsistent shape")));
            }
            if !layer.weights.iter().chain(&layer.biases).all(|v| v.is_finite()) {
                return Err(NnError::NonFinite { layer: idx });
            }
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }

    pub(crate) fn check_input(&self, sample: &[f64]) -> Result<()> {
        if sample.len() != self.spec.input_dim {
            return Err(NnError::DimensionMismatch {
                expected: self.spec.input_dim,
                got: sample.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, sample: &[f64]) -> Result<ForwardResult> {
        self.check_input(sample)?;
        let mut current = sample.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for layer in &self.layers[..last] {
            layer.affine_into(&current, &mut next);
            next.iter_mut().for_each(|v| *v = v.max(0.0));
            std::mem::swap(&mut current, &mut next);
        }
        let mut logits = Vec::with_capacity(self.spec.num_classes);
        self.layers[last].affine_into(&current, &mut logits);
        Ok(ForwardResult {
            logits,
            latent: current,
        })
    }

    pub fn latent(&self, sample: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(sample)?.latent)
    }

    pub fn probabilities(&self, sample: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.forward(sample)?.logits))
    }

    /// Argmax class, ties to the lowest index.
    pub fn predict(&self, sample: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(sample)?.logits))
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

/// Guard added inside the logarithm of [`cross_entropy`].
pub const LOG_EPSILON: f64 = 1e-12;

/// `-Σ target · ln(predicted + 1e-12)`.
pub fn cross_entropy(predicted: &[f64], target: &[f64]) -> f64 {
    -predicted
        .iter()
        .zip(target)
        .map(|(p, t)| t * (p + LOG_EPSILON).ln())
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    #[test]
    fn spec_validation() {
        assert!(NetworkSpec::new(0, vec![3], 2).is_err());
        assert!(NetworkSpec::new(2, vec![], 2).is_err());
        assert!(NetworkSpec::new(2, vec![3, 0], 2).is_err());
        assert!(NetworkSpec::new(2, vec![3], 1).is_err());
        let spec = NetworkSpec::new(4, vec![8], 3).unwrap();
        assert_eq!(spec.layer_shapes(), vec![(4, 8), (8, 3)]);
        assert_eq!(spec.latent_dim(), 8);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Network::zeros(NetworkSpec::new(3, vec![4, 2], 3).unwrap()).unwrap();
        let out = net.forward(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(out.logits, vec![0.0; 3]);
        assert_eq!(out.latent, vec![0.0; 2]);
    }

    #[test]
    fn identity_chain() {
        // 1-1-2 net: hidden weight 1, output rows (1, 0).
        let spec = NetworkSpec::new(1, vec![1], 2).unwrap();
        let mut net = Network::zeros(spec).unwrap();
        net.layers_mut()[0].weights = vec![1.0];
        net.layers_mut()[1].weights = vec![1.0, 0.0];
        let out = net.forward(&[2.0]).unwrap();
        assert_eq!(out.latent, vec![2.0]);
        assert_eq!(out.logits[0], 2.0);
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let net = Network::zeros(NetworkSpec::new(3, vec![4], 2).unwrap()).unwrap();
        assert!(matches!(
            net.forward(&[1.0]),
            Err(NnError::DimensionMismatch { expected: 3, got: 1 })
        ));
    }

    #[test]
    fn xavier_variance_for_small_layer() {
        // fan_in = 3, fan_out = 5 -> variance 2 / 8.
        let mut rng = seeded_rng(7);
        let mut draws = Vec::new();
        for _ in 0..7000 {
            let net = Network::xavier_init(NetworkSpec::new(3, vec![5], 2).unwrap(), &mut rng)
                .unwrap();
            draws.extend_from_slice(&net.layers()[0].weights);
        }
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 0.25).abs() / 0.25 < 0.03, "variance {var}");
        assert!(mean.abs() < 3.0 * (0.25f64 / n).sqrt(), "mean {mean}");
        assert!(net_biases_zero(&mut rng));
    }

    fn net_biases_zero(rng: &mut crate::Rng) -> bool {
        let net = Network::xavier_init(NetworkSpec::new(4, vec![8, 6], 3).unwrap(), rng).unwrap();
        net.layers().iter().all(|l| l.biases.iter().all(|&b| b == 0.0))
    }

    #[test]
    fn xavier_unit_fan_variance() {
        // fan_in = fan_out = 1 -> variance 2 / 2 = 1. Draw 10^5 samples through
        // the single 1x1 hidden layer of a 1-1-2 network.
        let mut rng = seeded_rng(11);
        let spec = NetworkSpec::new(1, vec![1], 2).unwrap();
        let draws: Vec<f64> = (0..100_000)
            .map(|_| Network::xavier_init(spec.clone(), &mut rng).unwrap().layers()[0].weights[0])
            .collect();
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
        assert!(mean.abs() < 3.0 * (1.0 / n).sqrt());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0, 0.0]);
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&[1000.0, 0.0, 0.0]);
        assert!((p[0] - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|v| v.is_finite()));
        // e^x / Σ e^x evaluated with 30-digit arithmetic for x = 1, 2, 3.
        let p = softmax(&[1.0, 2.0, 3.0]);
        let expected = [
            0.090_030_573_170_380_46,
            0.244_728_471_054_797_65,
            0.665_240_955_774_821_9,
        ];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn cross_entropy_examples() {
        assert!(cross_entropy(&[0.0, 1.0], &[0.0, 1.0]).abs() < 1e-11);
        let ce = cross_entropy(&[0.5, 0.5], &[0.5, 0.5]);
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-11);
        // Hard target reduces to -ln p[target].
        let p = [0.2, 0.7, 0.1];
        assert!((cross_entropy(&p, &[0.0, 1.0, 0.0]) + (0.7f64 + LOG_EPSILON).ln()).abs() < 1e-15);
    }
}
