//! Mini-batch training with Adam, step decay and early stopping.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::backprop::Workspace;
use super::{cross_entropy, softmax, step_decay_lr, AdamState, Network, NnError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr_step_size: usize,
    pub lr_gamma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::student()
    }
}

impl TrainConfig {
    /// Student schedule: lr 9e-4, batch 64, 100 epochs, patience 10, decay 0.95 every 20 epochs.
    pub fn student() -> Self {
        Self {
            learning_rate: 9e-4,
            batch_size: 64,
            max_epochs: 100,
            patience: 10,
            lr_step_size: 20,
            lr_gamma: 0.95,
            seed: 0,
        }
    }

    /// Teacher schedule: lr 5e-4, batch 64, 100 epochs, decay 0.95 every 5 epochs.
    pub fn teacher() -> Self {
        Self {
            learning_rate: 5e-4,
            lr_step_size: 5,
            ..Self::student()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NnError::InvalidSpec(format!("train config: {m}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 || self.lr_step_size == 0 {
            return bad("batch_size, max_epochs, patience and lr_step_size must be >= 1");
        }
        if self.patience > self.max_epochs {
            return bad("patience must not exceed max_epochs");
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return bad("lr_gamma must lie in (0, 1]");
        }
        Ok(())
    }
}

/// Borrowed samples with their target distributions.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet<'a> {
    inputs: Vec<&'a [f64]>,
    targets: Vec<&'a [f64]>,
}

impl<'a> TrainingSet<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(inputs: &'a [Vec<f64>], targets: &'a [Vec<f64>]) -> Self {
        let mut set = Self::new();
        for (x, t) in inputs.iter().zip(targets) {
            set.push(x, t);
        }
        set
    }

    pub fn push(&mut self, input: &'a [f64], target: &'a [f64]) {
        self.inputs.push(input);
        self.targets.push(target);
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn inputs(&self) -> &[&'a [f64]] {
        &self.inputs
    }

    pub fn targets(&self) -> &[&'a [f64]] {
        &self.targets
    }

    /// Mean cross-entropy of `net` over the set.
    pub fn mean_loss(&self, net: &Network) -> Result<f64> {
        if self.is_empty() {
            return Err(NnError::EmptyBatch);
        }
        let mut total = 0.0;
        for (x, t) in self.inputs.iter().zip(&self.targets) {
            total += cross_entropy(&softmax(&net.forward(x)?.logits), t);
        }
        Ok(total / self.len() as f64)
    }

    fn check(&self, net: &Network) -> Result<()> {
        let spec = net.spec();
        for (x, t) in self.inputs.iter().zip(&self.targets) {
            net.check_input(x)?;
            if t.len() != spec.num_classes {
                return Err(NnError::DimensionMismatch {
                    expected: spec.num_classes,
                    got: t.len(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept (only when validating).
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn epochs_run(&self) -> usize {
        self.epochs.len()
    }
}

/// Trains `net` in place.
///
/// Each epoch shuffles the training set and walks it in mini-batches of
/// `min(batch_size, |train|)` with a fresh Adam state for the whole call.
/// With a non-empty validation set, training stops once validation
/// cross-entropy has not improved for `patience` epochs and the best
/// snapshot is restored; otherwise exactly `max_epochs` epochs run.
pub fn train_until_convergence<R: Rng + ?Sized>(
    net: &mut Network,
    train: &TrainingSet<'_>,
    val: Option<&TrainingSet<'_>>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    train.check(net)?;
    let val = val.filter(|v| !v.is_empty());
    if let Some(v) = val {
        v.check(net)?;
    }

    let batch_size = cfg.batch_size.min(train.len());
    let mut adam = AdamState::for_network(net);
    let mut ws = Workspace::new(net);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Network)> = None;
    let mut since_best = 0;

    for epoch in 0..cfg.max_epochs {
        let lr = step_decay_lr(cfg.learning_rate, cfg.lr_step_size, cfg.lr_gamma, epoch);
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch_size) {
            ws.reset();
            for &i in chunk {
                epoch_loss += ws.accumulate(net, train.inputs[i], train.targets[i]);
            }
            ws.finish_mean(chunk.len());
            adam.step(net, &ws.grads, lr)?;
        }

        let val_loss = match val {
            Some(v) => Some(v.mean_loss(net)?),
            None => None,
        };
        history.epochs.push(EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss: epoch_loss / train.len() as f64,
            val_loss,
        });

        if let Some(loss) = val_loss {
            match &best {
                Some((best_loss, _)) if loss >= *best_loss => since_best += 1,
                _ => {
                    best = Some((loss, net.clone()));
                    history.best_epoch = Some(epoch);
                    since_best = 0;
                }
            }
            if since_best >= cfg.patience {
                history.stopped_early = epoch + 1 < cfg.max_epochs;
                break;
            }
        }
    }

    if let Some((_, snapshot)) = best {
        *net = snapshot;
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{argmax, one_hot};
    use crate::nn::NetworkSpec;
    use crate::seeded_rng;

    fn separable(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut rng = seeded_rng(seed);
        let mut xs = Vec::new();
        let mut ts = Vec::new();
        for i in 0..n {
            let class = i % 2;
            let sign = if class == 0 { -1.0 } else { 1.0 };
            let x = vec![sign * 2.0 + rng.random_range(-1.0..1.0), rng.random_range(-3.0..3.0)];
            xs.push(x);
            ts.push(one_hot(class, 2));
        }
        (xs, ts)
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-2,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            lr_step_size: 20,
            lr_gamma: 0.95,
            seed: 0,
        }
    }

    #[test]
    fn learns_linearly_separable_set() {
        let (xs, ts) = separable(200, 1);
        let set = TrainingSet::from_rows(&xs, &ts);
        let mut rng = seeded_rng(2);
        let mut net = Network::xavier_init(NetworkSpec::new(2, vec![8], 2).unwrap(), &mut rng).unwrap();
        train_until_convergence(&mut net, &set, None, &quick_cfg(), &mut rng).unwrap();
        let correct = xs
            .iter()
            .zip(&ts)
            .filter(|(x, t)| net.predict(x).unwrap() == argmax(t))
            .count();
        assert!(correct as f64 / 200.0 >= 0.99, "accuracy {correct}/200");
    }

    #[test]
    fn empty_validation_runs_all_epochs() {
        let (xs, ts) = separable(20, 3);
        let set = TrainingSet::from_rows(&xs, &ts);
        let mut rng = seeded_rng(4);
        let mut net = Network::xavier_init(NetworkSpec::new(2, vec![4], 2).unwrap(), &mut rng).unwrap();
        let cfg = TrainConfig { max_epochs: 37, ..quick_cfg() };
        let empty = TrainingSet::new();
        let h = train_until_convergence(&mut net, &set, Some(&empty), &cfg, &mut rng).unwrap();
        assert_eq!(h.epochs_run(), 37);
        assert!(h.best_epoch.is_none());
    }

    #[test]
    fn early_stopping_restores_best_snapshot() {
        let (xs, ts) = separable(60, 5);
        // Validation labels are flipped, so validation loss rises as training fits.
        let flipped: Vec<Vec<f64>> = ts.iter().map(|t| vec![t[1], t[0]]).collect();
        let train = TrainingSet::from_rows(&xs[..40], &ts[..40]);
        let val = TrainingSet::from_rows(&xs[40..], &flipped[40..]);
        let mut rng = seeded_rng(6);
        let mut net = Network::xavier_init(NetworkSpec::new(2, vec![8], 2).unwrap(), &mut rng).unwrap();
        let h = train_until_convergence(&mut net, &train, Some(&val), &quick_cfg(), &mut rng).unwrap();
        assert!(h.stopped_early);
        let best = h.best_epoch.unwrap();
        assert_eq!(h.epochs_run(), best + 1 + quick_cfg().patience);
        let kept = val.mean_loss(&net).unwrap();
        assert_eq!(Some(kept), h.epochs[best].val_loss);
    }

    #[test]
    fn identical_seeds_give_identical_weights() {
        let (xs, ts) = separable(50, 8);
        let set = TrainingSet::from_rows(&xs, &ts);
        let run = || {
            let mut rng = seeded_rng(99);
            let mut net =
                Network::xavier_init(NetworkSpec::new(2, vec![6, 4], 2).unwrap(), &mut rng).unwrap();
            let cfg = TrainConfig { max_epochs: 15, ..quick_cfg() };
            train_until_convergence(&mut net, &set, None, &cfg, &mut rng).unwrap();
            net
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn invalid_config_rejected() {
        let (xs, ts) = separable(4, 1);
        let set = TrainingSet::from_rows(&xs, &ts);
        let mut rng = seeded_rng(0);
        let mut net = Network::zeros(NetworkSpec::new(2, vec![2], 2).unwrap()).unwrap();
        let cfg = TrainConfig { patience: 200, max_epochs: 100, ..quick_cfg() };
        assert!(train_until_convergence(&mut net, &set, None, &cfg, &mut rng).is_err());
        let cfg = TrainConfig { lr_gamma: 1.5, ..quick_cfg() };
        assert!(train_until_convergence(&mut net, &set, None, &cfg, &mut rng).is_err());
        let empty = TrainingSet::new();
        assert!(train_until_convergence(&mut net, &empty, None, &quick_cfg(), &mut rng).is_err());
    }
}
