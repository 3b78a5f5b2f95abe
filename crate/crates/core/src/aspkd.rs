//! Active self-paced knowledge distillation.
//!
//! One run spends exactly `n = per_class_budget × num_classes` oracle calls in
//! rounds of at most `s` calls. Every round:
//!
//! 1. picks `min(s, n - |X'|)` active pool samples, either with the active
//!    sampler or uniformly at random depending on [`AttackMode`],
//! 2. queries the oracle for them and moves them from the pool into the
//!    teacher-labeled set `X'`,
//! 3. trains the student on `X'` until convergence,
//! 4. in self-paced modes, pseudo-labels the remaining pool by kNN and trains
//!    on `X' ∪ X''` until convergence.
//!
//! The student is initialized once; weights carry over between phases and
//! rounds while every training phase starts with a fresh optimizer state.
//! Early stopping validates on a stratified 15% of `X'` once `X'` holds at
//! least two samples per class.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{stratified_split, ProxyPool};
use crate::eval::mean_std;
use crate::nn::{train_until_convergence, Network, NetworkSpec, NnError, TrainConfig, TrainingSet};
use crate::oracle::{CountingOracle, LabelMode, Oracle, OracleError, OracleResponse};
use crate::pseudo::{pseudo_label_pool, DistanceMetric, NeighborWeighting, PseudoLabelConfig, PseudoLabelError};
use crate::sampler::{select_batch, CentroidChoice, RbfDistance, SamplerConfig, SamplerError};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack configuration: {0}")]
    InvalidConfig(String),
    #[error("proxy pool has {available} active samples, the budget needs {needed}")]
    PoolTooSmall { needed: usize, available: usize },
    #[error("oracle has {remaining} calls left, the attack needs {needed}")]
    BudgetTooSmall { needed: usize, remaining: usize },
    #[error("oracle budget ran out mid-run after {used} calls (accounting bug)")]
    BudgetExhaustedMidRun { used: usize },
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Network(#[from] NnError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    PseudoLabel(#[from] PseudoLabelError),
}

pub type Result<T, E = AttackError> = std::result::Result<T, E>;

/// Ablation arms: which of active selection and self-paced labeling are on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttackMode {
    /// Uniform random selection of all `n` samples in one round, supervised phase only.
    #[serde(rename = "vanilla")]
    Vanilla,
    /// Active selection over `r` rounds, no pseudo-labeling.
    #[serde(rename = "active")]
    ActiveOnly,
    /// Uniform random selection over `r` rounds, with pseudo-labeling.
    #[serde(rename = "self-paced")]
    SelfPacedOnly,
    /// Active selection and pseudo-labeling.
    #[serde(rename = "full")]
    Full,
}

impl AttackMode {
    pub const ALL: [AttackMode; 4] = [Self::Vanilla, Self::ActiveOnly, Self::SelfPacedOnly, Self::Full];

    pub fn uses_active_selection(self) -> bool {
        matches!(self, Self::ActiveOnly | Self::Full)
    }

    pub fn uses_self_paced(self) -> bool {
        matches!(self, Self::SelfPacedOnly | Self::Full)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Vanilla => "vanilla",
            Self::ActiveOnly => "active",
            Self::SelfPacedOnly => "self-paced",
            Self::Full => "full",
        }
    }
}

impl std::fmt::Display for AttackMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.as_str())
    }
}

impl std::str::FromStr for AttackMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "vanilla" => Ok(Self::Vanilla),
            "active" | "active-only" | "active_only" => Ok(Self::ActiveOnly),
            "self-paced" | "self-paced-only" | "self_paced_only" => Ok(Self::SelfPacedOnly),
            "full" => Ok(Self::Full),
            other => Err(format!("unknown mode {other:?} (expected vanilla|active|self-paced|full)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AspkdConfig {
    pub per_class_budget: usize,
    /// Calls per round `s`. Defaults to `⌈n / min(3, per_class_budget)⌉`.
    pub calls_per_round: Option<usize>,
    pub k: usize,
    pub sigma: f64,
    /// Defaults to cosine for soft labels and Euclidean for hard labels.
    pub metric: Option<DistanceMetric>,
    pub label_mode: LabelMode,
    pub mode: AttackMode,
    pub train: TrainConfig,
    pub validation_fraction: f64,
    pub seed: u64,
    pub rbf_distance: RbfDistance,
    pub centroid_choice: CentroidChoice,
    pub weighting: NeighborWeighting,
}

impl Default for AspkdConfig {
    fn default() -> Self {
        Self {
            per_class_budget: 4,
            calls_per_round: None,
            k: 5,
            sigma: 17.0,
            metric: None,
            label_mode: LabelMode::Soft,
            mode: AttackMode::Full,
            train: TrainConfig::student(),
            validation_fraction: 0.15,
            seed: 0,
            rbf_distance: RbfDistance::SquaredEuclidean,
            centroid_choice: CentroidChoice::Nearest,
            weighting: NeighborWeighting::OneMinusDistance,
        }
    }
}

impl AspkdConfig {
    pub fn total_budget(&self, num_classes: usize) -> usize {
        self.per_class_budget * num_classes
    }

    /// Calls per round for a total budget `n`. Vanilla always uses one round.
    pub fn calls_per_round(&self, n: usize) -> usize {
        if self.mode == AttackMode::Vanilla {
            return n.max(1);
        }
        let s = self.calls_per_round.unwrap_or_else(|| {
            let rounds = self.per_class_budget.clamp(1, 3);
            n.div_ceil(rounds)
        });
        s.clamp(1, n.max(1))
    }

    /// `⌈n / s⌉`.
    pub fn rounds(&self, n: usize) -> usize {
        n.div_ceil(self.calls_per_round(n))
    }

    pub fn metric(&self) -> DistanceMetric {
        self.metric.unwrap_or(DistanceMetric::default_for(self.label_mode))
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            sigma: self.sigma,
            distance: self.rbf_distance,
            centroid: self.centroid_choice,
        }
    }

    pub fn pseudo_labeling(&self) -> PseudoLabelConfig {
        PseudoLabelConfig {
            k: self.k,
            metric: self.metric(),
            mode: self.label_mode,
            weighting: self.weighting,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AttackError::InvalidConfig(m.to_owned()));
        if self.per_class_budget == 0 {
            return bad("per_class_budget must be >= 1");
        }
        if self.calls_per_round == Some(0) {
            return bad("calls_per_round must be >= 1");
        }
        if self.k == 0 {
            return bad("k must be >= 1");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be positive");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)");
        }
        self.train.validate()?;
        Ok(())
    }
}

/// Teacher-labeled proxy samples `X'` and their responses `Y'`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledProxySet {
    pub samples: Vec<Vec<f64>>,
    pub responses: Vec<OracleResponse>,
    /// Responses as training targets (soft distribution or one-hot).
    pub targets: Vec<Vec<f64>>,
    /// Where each sample came from in the pool.
    pub pool_indices: Vec<usize>,
}

impl LabeledProxySet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn push(&mut self, pool_index: usize, sample: Vec<f64>, response: OracleResponse, num_classes: usize) {
        self.targets.push(response.to_distribution(num_classes));
        self.samples.push(sample);
        self.responses.push(response);
        self.pool_indices.push(pool_index);
    }

    pub fn classes(&self) -> Vec<usize> {
        self.responses.iter().map(OracleResponse::class).collect()
    }
}

/// Training stage an attack round is in; reported to [`RoundObserver`]s.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    ActiveSelection,
    RandomSelection,
    Supervised,
    PseudoLabel,
    Joint,
}

/// Hooks into a running attack. Observers see the pool but never the oracle.
pub trait RoundObserver {
    fn on_phase(&mut self, _round: usize, _phase: Phase) {}

    /// Called right after the pool was pseudo-labeled. A returned value is
    /// recorded as that round's pseudo-label accuracy.
    fn after_pseudo_label(&mut self, _round: usize, _pool: &ProxyPool) -> Option<f64> {
        None
    }
}

pub struct NoopObserver;

impl RoundObserver for NoopObserver {}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub selection_ms: f64,
    pub supervised_ms: f64,
    pub pseudo_label_ms: f64,
    pub joint_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub calls_used: usize,
    pub labeled_size: usize,
    pub supervised_epochs: usize,
    pub joint_epochs: Option<usize>,
    /// SHA-256 prefix of the pool's pseudo-labels and active flags after the round.
    pub pseudo_label_hash: String,
    pub pseudo_label_accuracy: Option<f64>,
    pub timings: PhaseTimings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: AttackMode,
    pub label_mode: LabelMode,
    pub metric: DistanceMetric,
    pub budget: usize,
    pub calls_per_round: usize,
    pub calls_used: usize,
    pub rounds: Vec<RoundRecord>,
    /// Filled in by the caller after evaluation.
    pub agreement_accuracy: Option<f64>,
    /// Last recorded pseudo-label accuracy, when diagnostics were enabled.
    pub pseudo_label_accuracy: Option<f64>,
    pub student: Network,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization is infallible")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub student: Network,
    pub report: RunReport,
    pub labeled: LabeledProxySet,
}

/// Hash of the pool's current labeling state.
pub fn pool_label_hash(pool: &ProxyPool) -> String {
    let mut hasher = Sha256::new();
    for (label, active) in pool.pseudo_label.iter().zip(&pool.active) {
        for v in label {
            hasher.update(v.to_le_bytes());
        }
        hasher.update([u8::from(*active)]);
    }
    hex::encode(&hasher.finalize()[..8])
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Uniformly random distinct active pool indices.
pub fn random_selection<R: Rng + ?Sized>(pool: &ProxyPool, count: usize, rng: &mut R) -> Result<Vec<usize>> {
    let active = pool.active_indices();
    if count > active.len() {
        return Err(AttackError::PoolTooSmall {
            needed: count,
            available: active.len(),
        });
    }
    Ok(rand::seq::index::sample(rng, active.len(), count)
        .into_iter()
        .map(|slot| active[slot])
        .collect())
}

/// Train/validation index split of `X'` used for early stopping.
///
/// Validation is disabled (everything trains) until `X'` holds at least two
/// samples per class.
pub fn labeled_split<R: Rng + ?Sized>(
    labeled: &LabeledProxySet,
    num_classes: usize,
    fraction: f64,
    rng: &mut R,
) -> (Vec<usize>, Vec<usize>) {
    if labeled.len() < 2 * num_classes || fraction <= 0.0 {
        return ((0..labeled.len()).collect(), Vec::new());
    }
    stratified_split(&labeled.classes(), num_classes, fraction, rng)
}

/// Runs the attack without observers.
pub fn run_aspkd<R: Rng + ?Sized>(
    oracle: &dyn Oracle,
    pool: &mut ProxyPool,
    student_spec: &NetworkSpec,
    cfg: &AspkdConfig,
    rng: &mut R,
) -> Result<AttackOutcome> {
    run_aspkd_observed(oracle, pool, student_spec, cfg, rng, &mut NoopObserver)
}

/// Runs the attack, reporting progress to `observer`.
pub fn run_aspkd_observed<R: Rng + ?Sized>(
    oracle: &dyn Oracle,
    pool: &mut ProxyPool,
    student_spec: &NetworkSpec,
    cfg: &AspkdConfig,
    rng: &mut R,
    observer: &mut dyn RoundObserver,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    student_spec.validate()?;
    let num_classes = pool.num_classes;
    if student_spec.num_classes != num_classes || oracle.num_classes() != num_classes {
        return Err(AttackError::InvalidConfig(format!(
            "class counts disagree: pool {num_classes}, student {}, oracle {}",
            student_spec.num_classes,
            oracle.num_classes()
        )));
    }
    if student_spec.input_dim != oracle.input_dim() {
        return Err(AttackError::InvalidConfig(format!(
            "student input_dim {} does not match oracle input_dim {}",
            student_spec.input_dim,
            oracle.input_dim()
        )));
    }
    if oracle.label_mode() != cfg.label_mode {
        return Err(AttackError::InvalidConfig(format!(
            "oracle answers {} labels but the attack is configured for {}",
            oracle.label_mode(),
            cfg.label_mode
        )));
    }
    let n = cfg.total_budget(num_classes);
    let available = pool.active_count();
    if available < n {
        return Err(AttackError::PoolTooSmall { needed: n, available });
    }
    let status = oracle.budget_status()?;
    let remaining = status.limit.saturating_sub(status.used);
    if remaining < n {
        return Err(AttackError::BudgetTooSmall { needed: n, remaining });
    }

    let s = cfg.calls_per_round(n);
    let sampler = cfg.sampler();
    let labeling = cfg.pseudo_labeling();
    let mut student = Network::xavier_init(student_spec.clone(), rng)?;
    let mut labeled = LabeledProxySet::default();
    let mut rounds = Vec::with_capacity(cfg.rounds(n));

    while labeled.len() < n {
        let round = rounds.len();
        let count = s.min(n - labeled.len());
        let mut timings = PhaseTimings::default();

        let start = Instant::now();
        let picked = if cfg.mode.uses_active_selection() {
            observer.on_phase(round, Phase::ActiveSelection);
            select_batch(pool, &student, &sampler, count, rng)?
        } else {
            observer.on_phase(round, Phase::RandomSelection);
            random_selection(pool, count, rng)?
        };
        for idx in picked {
            let response = match oracle.query(&pool.features[idx]) {
                Ok(r) => r,
                Err(OracleError::BudgetExhausted { .. }) => {
                    return Err(AttackError::BudgetExhaustedMidRun { used: labeled.len() })
                }
                Err(e) => return Err(e.into()),
            };
            labeled.push(idx, pool.features[idx].clone(), response, num_classes);
            pool.promote(idx);
        }
        timings.selection_ms = elapsed_ms(start);

        let start = Instant::now();
        observer.on_phase(round, Phase::Supervised);
        let (train_idx, val_idx) = labeled_split(&labeled, num_classes, cfg.validation_fraction, rng);
        let mut train_set = TrainingSet::new();
        for &i in &train_idx {
            train_set.push(&labeled.samples[i], &labeled.targets[i]);
        }
        let mut val_set = TrainingSet::new();
        for &i in &val_idx {
            val_set.push(&labeled.samples[i], &labeled.targets[i]);
        }
        let history = train_until_convergence(&mut student, &train_set, Some(&val_set), &cfg.train, rng)?;
        timings.supervised_ms = elapsed_ms(start);

        let mut joint_epochs = None;
        let mut pseudo_accuracy = None;
        if cfg.mode.uses_self_paced() && pool.active_count() > 0 {
            let start = Instant::now();
            observer.on_phase(round, Phase::PseudoLabel);
            pseudo_label_pool(pool, &labeled, &student, &labeling)?;
            pseudo_accuracy = observer.after_pseudo_label(round, pool);
            timings.pseudo_label_ms = elapsed_ms(start);

            let start = Instant::now();
            observer.on_phase(round, Phase::Joint);
            let mut joint = train_set.clone();
            for i in pool.active_indices() {
                joint.push(&pool.features[i], &pool.pseudo_label[i]);
            }
            let history = train_until_convergence(&mut student, &joint, Some(&val_set), &cfg.train, rng)?;
            joint_epochs = Some(history.epochs_run());
            timings.joint_ms = elapsed_ms(start);
        }

        log::debug!(
            "round {round}: |X'| = {}, supervised epochs {}, joint epochs {:?}",
            labeled.len(),
            history.epochs_run(),
            joint_epochs
        );
        rounds.push(RoundRecord {
            round,
            calls_used: labeled.len(),
            labeled_size: labeled.len(),
            supervised_epochs: history.epochs_run(),
            joint_epochs,
            pseudo_label_hash: pool_label_hash(pool),
            pseudo_label_accuracy: pseudo_accuracy,
            timings,
        });
    }

    let pseudo_label_accuracy = rounds.iter().rev().find_map(|r| r.pseudo_label_accuracy);
    let report = RunReport {
        mode: cfg.mode,
        label_mode: cfg.label_mode,
        metric: cfg.metric(),
        budget: n,
        calls_per_round: s,
        calls_used: labeled.len(),
        rounds,
        agreement_accuracy: None,
        pseudo_label_accuracy,
        student: student.clone(),
    };
    Ok(AttackOutcome {
        student,
        report,
        labeled,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub mode: AttackMode,
    pub seed: u64,
    pub agreement_accuracy: f64,
    pub calls_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: AttackMode,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

/// Agreement accuracy per (mode, seed).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    pub fn accuracies(&self, mode: AttackMode) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|c| c.mode == mode)
            .map(|c| c.agreement_accuracy)
            .collect()
    }

    /// Mean ± sample standard deviation per mode, in [`AttackMode::ALL`] order.
    pub fn summary(&self) -> Vec<ModeSummary> {
        AttackMode::ALL
            .iter()
            .map(|&mode| {
                let acc = self.accuracies(mode);
                let (mean, std) = mean_std(&acc);
                ModeSummary {
                    mode,
                    mean,
                    std,
                    runs: acc.len(),
                }
            })
            .collect()
    }

    pub fn mean(&self, mode: AttackMode) -> f64 {
        mean_std(&self.accuracies(mode)).0
    }
}

/// Runs all four modes for every seed on matched budgets and data.
///
/// `oracle_factory(seed, n)` must return a fresh oracle with at least `n`
/// calls; `pool_factory(seed)` the proxy pool for that seed; `evaluate` scores
/// a trained student (agreement accuracy against the teacher).
pub fn run_ablation_suite<OF, PF, EV>(
    oracle_factory: OF,
    pool_factory: PF,
    evaluate: EV,
    student_spec: &NetworkSpec,
    cfg: &AspkdConfig,
    seeds: &[u64],
) -> Result<AblationTable>
where
    OF: Fn(u64, usize) -> Box<dyn Oracle>,
    PF: Fn(u64) -> ProxyPool,
    EV: Fn(&Network) -> f64,
{
    if seeds.len() < 2 {
        return Err(AttackError::InvalidConfig("an ablation needs at least two seeds".into()));
    }
    let mut table = AblationTable::default();
    for &seed in seeds {
        for mode in AttackMode::ALL {
            let run_cfg = AspkdConfig {
                mode,
                seed,
                ..cfg.clone()
            };
            let mut pool = pool_factory(seed);
            let n = run_cfg.total_budget(pool.num_classes);
            let oracle = CountingOracle::new(oracle_factory(seed, n));
            let mut rng = crate::seeded_rng(seed);
            let outcome = run_aspkd(&oracle, &mut pool, student_spec, &run_cfg, &mut rng)?;
            let agreement_accuracy = evaluate(&outcome.student);
            log::info!("ablation seed {seed} mode {mode}: agreement {agreement_accuracy:.4}");
            table.cells.push(AblationCell {
                mode,
                seed,
                agreement_accuracy,
                calls_used: oracle.counts().successes,
            });
        }
    }
    Ok(table)
}
