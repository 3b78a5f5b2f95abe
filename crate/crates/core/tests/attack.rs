//! Attack loop behavior: budget accounting, round structure, ablation arms.

use extraction_lab::aspkd::{labeled_split, run_aspkd_observed, Phase, RoundObserver};
use extraction_lab::data::{DatasetSpec, Generator};
use extraction_lab::nn::{train_until_convergence, TrainingSet};
use extraction_lab::oracle::CountingOracle;
use extraction_lab::scenario::{Scenario, ScenarioSpec};
use extraction_lab::{
    run_ablation_suite, run_aspkd, seeded_rng, AspkdConfig, AttackError, AttackMode, LabelMode, LabeledProxySet,
    Network, Oracle, ProxyPool, RunReport, TrainConfig,
};

fn small_scenario() -> Scenario {
    let spec = ScenarioSpec {
        dataset: DatasetSpec {
            generator: Generator::GaussianBlobs,
            num_classes: 3,
            input_dim: 4,
            per_class_count: 40,
            class_separation: 4.0,
            noise_scale: 1.0,
            distribution_shift: 0.0,
            seed: 11,
        },
        pool_per_class: 30,
        proxy_shift: 0.3,
        teacher_hidden: vec![16],
        teacher_train: TrainConfig {
            max_epochs: 30,
            learning_rate: 5e-3,
            seed: 3,
            ..TrainConfig::teacher()
        },
        student_hidden: vec![8, 6],
    };
    Scenario::build(spec).unwrap()
}

fn quick_cfg(per_class: usize, mode: AttackMode, label_mode: LabelMode) -> AspkdConfig {
    AspkdConfig {
        per_class_budget: per_class,
        mode,
        label_mode,
        train: TrainConfig {
            max_epochs: 8,
            patience: 3,
            learning_rate: 5e-3,
            ..TrainConfig::student()
        },
        ..AspkdConfig::default()
    }
}

#[derive(Default)]
struct PhaseLog(Vec<(usize, Phase)>);

impl RoundObserver for PhaseLog {
    fn on_phase(&mut self, round: usize, phase: Phase) {
        self.0.push((round, phase));
    }
}

#[test]
fn every_mode_spends_exactly_the_budget() {
    let sc = small_scenario();
    for (i, mode) in AttackMode::ALL.into_iter().enumerate() {
        for label_mode in [LabelMode::Soft, LabelMode::Hard] {
            for (per_class, s) in [(1, None), (2, None), (4, Some(5)), (5, Some(1))] {
                let cfg = AspkdConfig {
                    calls_per_round: s,
                    ..quick_cfg(per_class, mode, label_mode)
                };
                let n = cfg.total_budget(3);
                // Exactly n calls available: any over-spend would surface as an error.
                let oracle = CountingOracle::new(sc.oracle(label_mode, n));
                let mut pool = sc.proxy_pool(i as u64).unwrap();
                let out = run_aspkd(&oracle, &mut pool, &sc.student_spec(), &cfg, &mut seeded_rng(5)).unwrap();
                let counts = oracle.counts();
                assert_eq!(counts.successes, n, "{mode} {label_mode} {per_class}");
                assert_eq!(counts.failures, 0);
                assert_eq!(out.report.calls_used, n);
                assert_eq!(out.labeled.len(), n);
                assert_eq!(pool.active_count(), pool.len() - n);
                assert_eq!(out.report.rounds.len(), cfg.rounds(n));
                for idx in &out.labeled.pool_indices {
                    assert!(!pool.active[*idx]);
                }
            }
        }
    }
}

#[test]
fn round_count_law() {
    let cases = [(1, None, 1), (2, None, 2), (3, None, 3), (8, None, 3), (4, Some(5), 3), (4, Some(12), 1), (2, Some(1), 6)];
    for (per_class, s, rounds) in cases {
        let cfg = AspkdConfig {
            calls_per_round: s,
            ..quick_cfg(per_class, AttackMode::Full, LabelMode::Soft)
        };
        assert_eq!(cfg.rounds(cfg.total_budget(3)), rounds, "per_class {per_class}, s {s:?}");
    }
}

#[test]
fn vanilla_never_touches_sampler_or_pseudo_labeler() {
    let sc = small_scenario();
    let cfg = quick_cfg(4, AttackMode::Vanilla, LabelMode::Soft);
    let oracle = sc.oracle(LabelMode::Soft, 12);
    let mut pool = sc.proxy_pool(1).unwrap();
    let before = pool.pseudo_label.clone();
    let mut log = PhaseLog::default();
    run_aspkd_observed(&oracle, &mut pool, &sc.student_spec(), &cfg, &mut seeded_rng(1), &mut log).unwrap();
    assert_eq!(log.0, vec![(0, Phase::RandomSelection), (0, Phase::Supervised)]);
    assert_eq!(pool.pseudo_label, before);
}

#[test]
fn ablation_arms_run_their_phases() {
    let sc = small_scenario();
    let expect = |mode: AttackMode| -> Vec<Phase> {
        let mut phases = vec![if mode.uses_active_selection() { Phase::ActiveSelection } else { Phase::RandomSelection }, Phase::Supervised];
        if mode.uses_self_paced() {
            phases.extend([Phase::PseudoLabel, Phase::Joint]);
        }
        phases
    };
    for mode in [AttackMode::ActiveOnly, AttackMode::SelfPacedOnly, AttackMode::Full] {
        let cfg = quick_cfg(3, mode, LabelMode::Hard);
        let oracle = sc.oracle(LabelMode::Hard, 9);
        let mut pool = sc.proxy_pool(2).unwrap();
        let mut log = PhaseLog::default();
        run_aspkd_observed(&oracle, &mut pool, &sc.student_spec(), &cfg, &mut seeded_rng(2), &mut log).unwrap();
        for round in 0..3 {
            let got: Vec<Phase> = log.0.iter().filter(|(r, _)| *r == round).map(|(_, p)| *p).collect();
            assert_eq!(got, expect(mode), "{mode} round {round}");
        }
    }
}

/// Straight-line vanilla: pick n at random, query, train once.
fn reference_vanilla(sc: &Scenario, pool: &ProxyPool, cfg: &AspkdConfig, seed: u64) -> Network {
    let mut rng = seeded_rng(seed);
    let mut student = Network::xavier_init(sc.student_spec(), &mut rng).unwrap();
    let n = cfg.total_budget(pool.num_classes);
    let active: Vec<usize> = (0..pool.len()).filter(|&i| pool.active[i]).collect();
    let oracle = sc.oracle(cfg.label_mode, n);
    let mut labeled = LabeledProxySet::default();
    for slot in rand::seq::index::sample(&mut rng, active.len(), n) {
        let idx = active[slot];
        let response = oracle.query(&pool.features[idx]).unwrap();
        labeled.push(idx, pool.features[idx].clone(), response, pool.num_classes);
    }
    let (train_idx, val_idx) = labeled_split(&labeled, pool.num_classes, cfg.validation_fraction, &mut rng);
    let mut train = TrainingSet::new();
    for &i in &train_idx {
        train.push(&labeled.samples[i], &labeled.targets[i]);
    }
    let mut val = TrainingSet::new();
    for &i in &val_idx {
        val.push(&labeled.samples[i], &labeled.targets[i]);
    }
    train_until_convergence(&mut student, &train, Some(&val), &cfg.train, &mut rng).unwrap();
    student
}

#[test]
fn vanilla_matches_straight_line_reference() {
    let sc = small_scenario();
    for (seed, per_class) in [(0u64, 1usize), (1, 2), (2, 4)] {
        for label_mode in [LabelMode::Soft, LabelMode::Hard] {
            let cfg = quick_cfg(per_class, AttackMode::Vanilla, label_mode);
            let pool = sc.proxy_pool(seed).unwrap();
            let expected = reference_vanilla(&sc, &pool, &cfg, seed);
            let mut run_pool = pool.clone();
            let oracle = sc.oracle(label_mode, cfg.total_budget(3));
            let out = run_aspkd(&oracle, &mut run_pool, &sc.student_spec(), &cfg, &mut seeded_rng(seed)).unwrap();
            assert_eq!(out.student, expected, "seed {seed}, {label_mode}");
        }
    }
}

#[test]
fn runs_are_deterministic_and_reports_round_trip() {
    let sc = small_scenario();
    let cfg = quick_cfg(3, AttackMode::Full, LabelMode::Soft);
    let run = || {
        let oracle = sc.oracle(LabelMode::Soft, 9);
        let mut pool = sc.proxy_pool(4).unwrap();
        run_aspkd(&oracle, &mut pool, &sc.student_spec(), &cfg, &mut seeded_rng(4)).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.student, b.student);
    let hashes = |r: &RunReport| r.rounds.iter().map(|x| x.pseudo_label_hash.clone()).collect::<Vec<_>>();
    assert_eq!(hashes(&a.report), hashes(&b.report));
    let back = RunReport::from_json(&a.report.to_json()).unwrap();
    assert_eq!(back.student, a.student);
    assert_eq!(back.rounds.len(), a.report.rounds.len());
}

#[test]
fn pseudo_labels_stay_normalized() {
    let sc = small_scenario();
    for label_mode in [LabelMode::Soft, LabelMode::Hard] {
        let cfg = quick_cfg(4, AttackMode::Full, label_mode);
        let oracle = sc.oracle(label_mode, 12);
        let mut pool = sc.proxy_pool(6).unwrap();
        run_aspkd(&oracle, &mut pool, &sc.student_spec(), &cfg, &mut seeded_rng(6)).unwrap();
        assert!(pool.labels_normalized(1e-9));
    }
}

#[test]
fn preconditions_are_checked() {
    let sc = small_scenario();
    let student = sc.student_spec();

    let cfg = quick_cfg(4, AttackMode::Full, LabelMode::Soft);
    let oracle = sc.oracle(LabelMode::Soft, 11);
    let mut pool = sc.proxy_pool(0).unwrap();
    assert!(matches!(
        run_aspkd(&oracle, &mut pool, &student, &cfg, &mut seeded_rng(0)),
        Err(AttackError::BudgetTooSmall { needed: 12, remaining: 11 })
    ));

    let cfg = quick_cfg(31, AttackMode::Full, LabelMode::Soft);
    let oracle = sc.oracle(LabelMode::Soft, 1000);
    assert!(matches!(
        run_aspkd(&oracle, &mut pool, &student, &cfg, &mut seeded_rng(0)),
        Err(AttackError::PoolTooSmall { .. })
    ));

    let cfg = quick_cfg(2, AttackMode::Full, LabelMode::Hard);
    assert!(matches!(
        run_aspkd(&oracle, &mut pool, &student, &cfg, &mut seeded_rng(0)),
        Err(AttackError::InvalidConfig(_))
    ));
    // Failed preconditions spend nothing.
    assert_eq!(oracle.budget_status().unwrap().used, 0);
}

#[test]
fn ablation_suite_covers_all_modes_and_seeds() {
    let sc = small_scenario();
    let cfg = quick_cfg(2, AttackMode::Full, LabelMode::Soft);
    let table = run_ablation_suite(
        |_, n| Box::new(sc.oracle(LabelMode::Soft, n)),
        |seed| sc.proxy_pool(seed).unwrap(),
        |s| sc.agreement(s).unwrap(),
        &sc.student_spec(),
        &cfg,
        &[0, 1],
    )
    .unwrap();
    assert_eq!(table.cells.len(), 8);
    assert!(table.cells.iter().all(|c| c.calls_used == 6));
    let summary = table.summary();
    assert_eq!(summary.len(), 4);
    assert!(summary.iter().all(|m| m.runs == 2 && (0.0..=1.0).contains(&m.mean)));
    assert!(run_ablation_suite(
        |_, n| Box::new(sc.oracle(LabelMode::Soft, n)),
        |seed| sc.proxy_pool(seed).unwrap(),
        |_| 0.0,
        &sc.student_spec(),
        &cfg,
        &[0],
    )
    .is_err());
}
