use super::{Gradients, Network, NnError, Result};

/// Adam optimizer state with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl AdamState {
    pub fn new(parameter_count: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first_moment: vec![0.0; parameter_count],
            second_moment: vec![0.0; parameter_count],
        }
    }

    pub fn for_network(net: &Network) -> Self {
        Self::new(net.parameter_count())
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second_moment
    }

    /// One update of a flat parameter vector.
    pub fn step_slice(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        self.check_len(params.len())?;
        if grads.len() != params.len() {
            return Err(NnError::DimensionMismatch {
                expected: params.len(),
                got: grads.len(),
            });
        }
        self.step_count += 1;
        let (c1, c2) = self.corrections();
        self.apply(0, params, grads, lr, c1, c2);
        Ok(())
    }

    /// One update of every parameter of `net`.
    pub fn step(&mut self, net: &mut Network, grads: &Gradients, lr: f64) -> Result<()> {
        self.check_len(net.parameter_count())?;
        if grads.layers.len() != net.layers().len() {
            return Err(NnError::DimensionMismatch {
                expected: net.layers().len(),
                got: grads.layers.len(),
            });
        }
        self.step_count += 1;
        let (c1, c2) = self.corrections();
        let mut offset = 0;
        for (layer, g) in net.layers_mut().iter_mut().zip(&grads.layers) {
            if g.weights.len() != layer.weights.len() || g.biases.len() != layer.biases.len() {
                return Err(NnError::DimensionMismatch {
                    expected: layer.weights.len() + layer.biases.len(),
                    got: g.weights.len() + g.biases.len(),
                });
            }
            self.apply(offset, &mut layer.weights, &g.weights, lr, c1, c2);
            offset += layer.weights.len();
            self.apply(offset, &mut layer.biases, &g.biases, lr, c1, c2);
            offset += layer.biases.len();
        }
        Ok(())
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.first_moment.len() {
            return Err(NnError::DimensionMismatch {
                expected: self.first_moment.len(),
                got: n,
            });
        }
        Ok(())
    }

    fn corrections(&self) -> (f64, f64) {
        let t = self.step_count as i32;
        (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t))
    }

    fn apply(&mut self, offset: usize, params: &mut [f64], grads: &[f64], lr: f64, c1: f64, c2: f64) {
        let m = &mut self.first_moment[offset..offset + params.len()];
        let v = &mut self.second_moment[offset..offset + params.len()];
        for i in 0..params.len() {
            let g = grads[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}
