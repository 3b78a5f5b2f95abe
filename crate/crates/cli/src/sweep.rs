//! Budget sweeps and ablations over an in-process teacher.

use std::time::Instant;

use anyhow::{bail, Context};
use extraction_lab::aspkd::run_aspkd_observed;
use extraction_lab::eval::PseudoLabelDiagnostics;
use extraction_lab::scenario::Scenario;
use extraction_lab::{seeded_rng, AspkdConfig, AttackMode, LabelMode, Oracle};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::metrics::{aggregate, MetricsRow, RowKind};

/// Doubling grid `{1, 2, 4, ..., 256}` calls per class.
pub fn default_budgets() -> Vec<usize> {
    (0..=8).map(|e| 1usize << e).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub per_class_budgets: Vec<usize>,
    pub seeds: Vec<u64>,
    pub modes: Vec<AttackMode>,
    pub label_modes: Vec<LabelMode>,
    /// Fill `wall_ms`. Off by default so repeated sweeps are byte-identical.
    pub record_timing: bool,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            per_class_budgets: default_budgets(),
            seeds: (0..5).collect(),
            modes: vec![AttackMode::Full],
            label_modes: vec![LabelMode::Soft],
            record_timing: false,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> anyhow::Result<()> {
        if self.per_class_budgets.is_empty() || self.per_class_budgets.contains(&0) {
            bail!("sweep budgets must be a non-empty list of positive integers");
        }
        if self.per_class_budgets.windows(2).any(|w| w[0] >= w[1]) {
            bail!("sweep budgets must be strictly increasing: {:?}", self.per_class_budgets);
        }
        if self.seeds.is_empty() || self.modes.is_empty() || self.label_modes.is_empty() {
            bail!("sweep needs at least one seed, mode and label mode");
        }
        Ok(())
    }

    /// Every run of the sweep, in output order.
    pub fn requests(&self) -> Vec<RunRequest> {
        let mut out = Vec::new();
        for &per_class_budget in &self.per_class_budgets {
            for &label_mode in &self.label_modes {
                for &mode in &self.modes {
                    for &seed in &self.seeds {
                        out.push(RunRequest {
                            per_class_budget,
                            mode,
                            label_mode,
                            seed,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunRequest {
    pub per_class_budget: usize,
    pub mode: AttackMode,
    pub label_mode: LabelMode,
    pub seed: u64,
}

impl RunRequest {
    pub fn config(&self, template: &AspkdConfig) -> AspkdConfig {
        AspkdConfig {
            per_class_budget: self.per_class_budget,
            mode: self.mode,
            label_mode: self.label_mode,
            seed: self.seed,
            ..template.clone()
        }
    }
}

/// Runs one attack against a fresh in-process oracle holding exactly `n`
/// calls. Failures become a flagged row rather than an error.
///
/// The pool is the scenario's pool for `seed`, enlarged to twice the budget
/// when the budget would otherwise not fit.
pub fn run_one(scenario: &Scenario, template: &AspkdConfig, req: RunRequest, timing: bool) -> MetricsRow {
    let start = Instant::now();
    let cfg = req.config(template);
    let num_classes = scenario.spec.dataset.num_classes;
    let n = cfg.total_budget(num_classes);
    let oracle = scenario.oracle(req.label_mode, n);
    let result = (|| -> anyhow::Result<(f64, Option<f64>)> {
        let per_class = scenario.spec.pool_per_class.max(2 * req.per_class_budget);
        let mut pool = scenario.proxy_pool_sized(req.seed, per_class)?;
        let mut diagnostics = PseudoLabelDiagnostics::new(scenario.reference_classes(&pool.features)?);
        let outcome = run_aspkd_observed(
            &oracle,
            &mut pool,
            &scenario.student_spec(),
            &cfg,
            &mut seeded_rng(req.seed),
            &mut diagnostics,
        )?;
        let agreement = scenario.agreement(&outcome.student)?;
        Ok((agreement, outcome.report.pseudo_label_accuracy))
    })();
    let calls_used = oracle.budget_status().map(|b| b.used).unwrap_or(0);
    let (agreement, pseudo, status) = match result {
        Ok((a, p)) => (Some(a), p, "ok".to_owned()),
        Err(e) => {
            log::warn!("run {req:?} failed: {e:#}");
            (None, None, format!("failed: {e:#}"))
        }
    };
    MetricsRow {
        run_id: MetricsRow::run_id(req.per_class_budget, req.mode, req.label_mode, Some(req.seed)),
        kind: RowKind::Detail,
        per_class_budget: req.per_class_budget,
        mode: req.mode,
        label_mode: req.label_mode,
        seed: Some(req.seed),
        agreement_accuracy: agreement,
        agreement_accuracy_std: None,
        pseudo_label_accuracy: pseudo,
        pseudo_label_accuracy_std: None,
        calls_used,
        wall_ms: timing.then(|| start.elapsed().as_secs_f64() * 1e3),
        status,
    }
}

/// Runs every request on up to `jobs` threads. Returns detail rows in
/// request order followed by the aggregate rows.
pub fn run_requests(
    scenario: &Scenario,
    template: &AspkdConfig,
    requests: &[RunRequest],
    jobs: usize,
    timing: bool,
) -> anyhow::Result<Vec<MetricsRow>> {
    let threads = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .context("building the worker pool")?;
    let mut rows: Vec<MetricsRow> = threads.install(|| {
        requests
            .par_iter()
            .map(|&req| run_one(scenario, template, req, timing))
            .collect()
    });
    let aggregates = aggregate(&rows);
    rows.extend(aggregates);
    Ok(rows)
}

pub fn run_sweep(scenario: &Scenario, template: &AspkdConfig, spec: &SweepSpec, jobs: usize) -> anyhow::Result<Vec<MetricsRow>> {
    spec.validate()?;
    template.validate()?;
    run_requests(scenario, template, &spec.requests(), jobs, spec.record_timing)
}

/// All four ablation arms at the template's budget and label mode.
pub fn run_ablation(
    scenario: &Scenario,
    template: &AspkdConfig,
    seeds: &[u64],
    jobs: usize,
    timing: bool,
) -> anyhow::Result<Vec<MetricsRow>> {
    if seeds.len() < 2 {
        bail!("an ablation needs at least two seeds");
    }
    template.validate()?;
    let spec = SweepSpec {
        per_class_budgets: vec![template.per_class_budget],
        seeds: seeds.to_vec(),
        modes: AttackMode::ALL.to_vec(),
        label_modes: vec![template.label_mode],
        record_timing: timing,
    };
    run_requests(scenario, template, &spec.requests(), jobs, timing)
}
