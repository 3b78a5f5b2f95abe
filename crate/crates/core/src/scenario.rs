//! End-to-end experiment setup: hidden data, a trained teacher, proxy pools.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{generate_proxy_pool, generate_true_dataset, DataError, DatasetSpec, LabeledDataset, ProxyPool};
use crate::eval::agreement_accuracy;
use crate::nn::{train_until_convergence, Network, NetworkSpec, NnError, TrainConfig, TrainHistory, TrainingSet};
use crate::oracle::{LabelMode, LocalOracle};
use crate::seeded_rng;

/// Mixed into pool seeds so a pool never shares a stream with the hidden data.
const POOL_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    /// Hidden training data; split 80/20 into teacher train/test.
    pub dataset: DatasetSpec,
    /// Proxy pool size per class (pool holds `pool_per_class × num_classes` samples).
    pub pool_per_class: usize,
    /// Noise inflation of the proxy distribution.
    pub proxy_shift: f64,
    pub teacher_hidden: Vec<usize>,
    pub teacher_train: TrainConfig,
    pub student_hidden: Vec<usize>,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self::blobs_benchmark(0)
    }
}

impl ScenarioSpec {
    /// Ten overlapping-ish Gaussian blobs in 8 dimensions (separation 3,
    /// noise 1) with a 2000-sample proxy pool shifted by 0.3.
    pub fn blobs_benchmark(seed: u64) -> Self {
        Self {
            dataset: DatasetSpec { seed, ..DatasetSpec::default() },
            pool_per_class: 200,
            proxy_shift: 0.3,
            teacher_hidden: vec![64, 32],
            teacher_train: TrainConfig {
                seed,
                ..TrainConfig::teacher()
            },
            student_hidden: vec![32, 16],
        }
    }

    /// The benchmark with well separated classes (separation 10).
    pub fn separable_blobs(seed: u64) -> Self {
        let mut spec = Self::blobs_benchmark(seed);
        spec.dataset.class_separation = 10.0;
        spec
    }

    pub fn teacher_spec(&self) -> Result<NetworkSpec, NnError> {
        NetworkSpec::new(self.dataset.input_dim, self.teacher_hidden.clone(), self.dataset.num_classes)
    }

    pub fn student_spec(&self) -> Result<NetworkSpec, NnError> {
        NetworkSpec::new(self.dataset.input_dim, self.student_hidden.clone(), self.dataset.num_classes)
    }

    /// Proxy distribution: same class geometry, own size and shift.
    pub fn proxy_spec(&self) -> DatasetSpec {
        DatasetSpec {
            per_class_count: self.pool_per_class,
            distribution_shift: self.proxy_shift,
            ..self.dataset.clone()
        }
    }
}

/// Trains a teacher from Xavier init, early-stopping on a stratified 15% of
/// `train`. Randomness comes from `cfg.seed` alone.
pub fn train_teacher(
    train: &LabeledDataset,
    spec: NetworkSpec,
    cfg: &TrainConfig,
) -> Result<(Network, TrainHistory), NnError> {
    let mut rng = seeded_rng(cfg.seed);
    let mut teacher = Network::xavier_init(spec, &mut rng)?;
    let (fit, val) = train.split_validation(0.15, &mut rng);
    let fit_targets = fit.one_hot_targets();
    let val_targets = val.one_hot_targets();
    let fit_set = TrainingSet::from_rows(&fit.features, &fit_targets);
    let val_set = TrainingSet::from_rows(&val.features, &val_targets);
    let history = train_until_convergence(&mut teacher, &fit_set, Some(&val_set), cfg, &mut rng)?;
    Ok((teacher, history))
}

/// A built experiment: hidden data and the teacher trained on it.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub teacher: Network,
    /// Teacher accuracy against the true test labels.
    pub teacher_test_accuracy: f64,
    /// Teacher argmax on the test split; the reference for agreement.
    pub test_teacher_labels: Vec<usize>,
}

impl Scenario {
    pub fn build(spec: ScenarioSpec) -> Result<Self, ScenarioError> {
        let mut rng = seeded_rng(spec.dataset.seed);
        let (train, test) = generate_true_dataset(&spec.dataset, &mut rng)?;
        let (teacher, history) = train_teacher(&train, spec.teacher_spec()?, &spec.teacher_train)?;
        Self::with_teacher(spec, train, test, teacher).inspect(|s| {
            log::info!(
                "teacher trained for {} epochs, test accuracy {:.4}",
                history.epochs_run(),
                s.teacher_test_accuracy
            )
        })
    }

    /// Wraps an already trained teacher.
    pub fn with_teacher(
        spec: ScenarioSpec,
        train: LabeledDataset,
        test: LabeledDataset,
        teacher: Network,
    ) -> Result<Self, ScenarioError> {
        let test_teacher_labels = test
            .features
            .iter()
            .map(|x| teacher.predict(x))
            .collect::<Result<Vec<_>, _>>()?;
        let teacher_test_accuracy = agreement_accuracy(&teacher, &test.features, &test.labels)?;
        Ok(Self {
            spec,
            train,
            test,
            teacher,
            teacher_test_accuracy,
            test_teacher_labels,
        })
    }

    pub fn student_spec(&self) -> NetworkSpec {
        self.spec.student_spec().expect("scenario spec was validated on build")
    }

    /// Fresh proxy pool for `seed`; identical seeds give identical pools.
    pub fn proxy_pool(&self, seed: u64) -> Result<ProxyPool, ScenarioError> {
        self.proxy_pool_sized(seed, self.spec.pool_per_class)
    }

    /// Like [`Scenario::proxy_pool`] with a different pool size.
    pub fn proxy_pool_sized(&self, seed: u64, per_class: usize) -> Result<ProxyPool, ScenarioError> {
        let mut rng = seeded_rng(seed ^ POOL_SALT);
        let spec = DatasetSpec {
            per_class_count: per_class,
            ..self.spec.proxy_spec()
        };
        Ok(generate_proxy_pool(&spec, &mut rng)?)
    }

    pub fn oracle(&self, mode: LabelMode, limit: usize) -> LocalOracle {
        LocalOracle::new(self.teacher.clone(), mode, limit)
    }

    /// Student/teacher argmax agreement on the held-out test split.
    pub fn agreement(&self, student: &Network) -> Result<f64, NnError> {
        agreement_accuracy(student, &self.test.features, &self.test_teacher_labels)
    }

    /// Teacher argmax for every sample, off-budget. Used for diagnostics only.
    pub fn reference_classes(&self, samples: &[Vec<f64>]) -> Result<Vec<usize>, NnError> {
        samples.iter().map(|x| self.teacher.predict(x)).collect()
    }
}
