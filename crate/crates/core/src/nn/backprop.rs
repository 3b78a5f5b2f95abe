//! Mean-over-batch gradients of softmax cross-entropy.

use super::{cross_entropy, softmax, Network, NnError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Gradients with the same layout as a [`Network`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradients>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .layers()
                .iter()
                .map(|l| LayerGradients {
                    weights: vec![0.0; l.weights.len()],
                    biases: vec![0.0; l.biases.len()],
                })
                .collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|g| g.is_finite())
    }

    /// Parameters in layer order, weights before biases.
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
    }

    fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(&mut l.biases).for_each(|g| *g *= factor);
        }
    }

    fn reset(&mut self) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(&mut l.biases).for_each(|g| *g = 0.0);
        }
    }
}

/// Reusable per-sample buffers for backpropagation.
pub(crate) struct Workspace {
    /// `activations[0]` is the input, `activations[i]` the output of layer `i - 1`.
    activations: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
    pub(crate) grads: Gradients,
}

impl Workspace {
    pub(crate) fn new(net: &Network) -> Self {
        Self {
            activations: vec![Vec::new(); net.layers().len()],
            delta: Vec::new(),
            delta_prev: Vec::new(),
            grads: Gradients::zeros_like(net),
        }
    }

    pub(crate) fn reset(&mut self) {
        self.grads.reset();
    }

    /// Adds one sample's gradient into `grads` and returns its loss.
    pub(crate) fn accumulate(&mut self, net: &Network, input: &[f64], target: &[f64]) -> f64 {
        let layers = net.layers();
        let last = layers.len() - 1;
        self.activations[0].clear();
        self.activations[0].extend_from_slice(input);
        for (i, layer) in layers[..last].iter().enumerate() {
            let (done, rest) = self.activations.split_at_mut(i + 1);
            layer.affine_into(&done[i], &mut rest[0]);
            rest[0].iter_mut().for_each(|v| *v = v.max(0.0));
        }
        let mut logits = Vec::with_capacity(layers[last].fan_out);
        layers[last].affine_into(&self.activations[last], &mut logits);
        let probs = softmax(&logits);
        let loss = cross_entropy(&probs, target);

        // d(loss)/d(logits) = p * Σt - t, which is p - t for normalized targets.
        let mass: f64 = target.iter().sum();
        self.delta.clear();
        self.delta
            .extend(probs.iter().zip(target).map(|(p, t)| p * mass - t));

        for idx in (0..layers.len()).rev() {
            let layer = &layers[idx];
            let input = &self.activations[idx];
            let grad = &mut self.grads.layers[idx];
            for (o, &d) in self.delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                grad.biases[o] += d;
                let row = &mut grad.weights[o * layer.fan_in..(o + 1) * layer.fan_in];
                for (g, x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
            }
            if idx == 0 {
                break;
            }
            self.delta_prev.clear();
            self.delta_prev.resize(layer.fan_in, 0.0);
            for (o, &d) in self.delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.fan_in..(o + 1) * layer.fan_in];
                for (acc, w) in self.delta_prev.iter_mut().zip(row) {
                    *acc += d * w;
                }
            }
            // ReLU derivative, taken as 0 at the kink.
            for (acc, a) in self.delta_prev.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *acc = 0.0;
                }
            }
            std::mem::swap(&mut self.delta, &mut self.delta_prev);
        }
        loss
    }

    pub(crate) fn finish_mean(&mut self, count: usize) {
        self.grads.scale(1.0 / count as f64);
    }
}

/// Mean gradient of `cross_entropy(softmax(logits), target)` over a batch.
///
/// Returns the gradients together with the mean loss.
pub fn backward<X, T>(net: &Network, inputs: &[X], targets: &[T]) -> Result<(Gradients, f64)>
where
    X: AsRef<[f64]>,
    T: AsRef<[f64]>,
{
    if inputs.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    if inputs.len() != targets.len() {
        return Err(NnError::DimensionMismatch {
            expected: inputs.len(),
            got: targets.len(),
        });
    }
    let mut ws = Workspace::new(net);
    let mut total = 0.0;
    for (x, t) in inputs.iter().zip(targets) {
        let (x, t) = (x.as_ref(), t.as_ref());
        net.check_input(x)?;
        if t.len() != net.spec().num_classes {
            return Err(NnError::DimensionMismatch {
                expected: net.spec().num_classes,
                got: t.len(),
            });
        }
        total += ws.accumulate(net, x, t);
    }
    ws.finish_mean(inputs.len());
    Ok((ws.grads, total / inputs.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetworkSpec;

    #[test]
    fn confident_correct_prediction_has_tiny_gradient() {
        let spec = NetworkSpec::new(2, vec![3], 3).unwrap();
        let mut net = Network::zeros(spec).unwrap();
        net.layers_mut()[1].biases = vec![60.0, 0.0, 0.0];
        let (g, loss) = backward(&net, &[vec![0.5, -0.5]], &[vec![1.0, 0.0, 0.0]]).unwrap();
        assert!(g.norm() < 1e-6);
        assert!(loss < 1e-6);
    }

    #[test]
    fn duplicated_sample_matches_single() {
        let mut rng = crate::seeded_rng(3);
        let net = Network::xavier_init(NetworkSpec::new(4, vec![8], 3).unwrap(), &mut rng).unwrap();
        let x = vec![0.3, -1.2, 0.8, 2.0];
        let t = vec![0.2, 0.5, 0.3];
        let (single, _) = backward(&net, std::slice::from_ref(&x), std::slice::from_ref(&t)).unwrap();
        let (double, _) = backward(&net, &[x.clone(), x], &[t.clone(), t]).unwrap();
        for (a, b) in single.iter().zip(double.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_batch_rejected() {
        let net = Network::zeros(NetworkSpec::new(2, vec![2], 2).unwrap()).unwrap();
        let empty: Vec<Vec<f64>> = Vec::new();
        assert!(matches!(backward(&net, &empty, &empty), Err(NnError::EmptyBatch)));
    }
}
