use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use extraction_lab::aspkd::run_aspkd_observed;
use extraction_lab::data::{generate_true_dataset, load_dataset, load_pool, save_dataset, save_pool, Generator};
use extraction_lab::eval::{agreement_accuracy, PseudoLabelDiagnostics};
use extraction_lab::scenario::{train_teacher, Scenario, ScenarioSpec};
use extraction_lab::{
    seeded_rng, AttackMode, DistanceMetric, LabelMode, LocalOracle, Network, Oracle, RunReport,
};
use extraction_lab_cli::config::{parse_budgets, parse_seeds};
use extraction_lab_cli::metrics::{to_csv_string, MetricsRow, RowKind};
use extraction_lab_cli::{run_ablation, run_sweep, OracleSource, RunConfig};
use extraction_lab_service::{serve, RemoteOracle, ServiceConfig};

#[derive(Parser)]
#[command(name = "extraction-lab", version, about = "Few-call model extraction experiments on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate hidden train/test data and a proxy pool into a directory.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
    /// Train a teacher on a generated data directory.
    TrainTeacher {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
    },
    /// Serve a teacher checkpoint over HTTP until interrupted.
    Serve {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long, default_value = "soft")]
        label_mode: LabelMode,
        /// Total number of predictions the service will answer.
        #[arg(long)]
        budget: usize,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
    },
    /// Run one attack against a local teacher or a running service.
    Attack {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        attack: AttackArgs,
        /// Directory written by gen-data (pool, test split, scenario).
        #[arg(long)]
        data: PathBuf,
        /// Teacher checkpoint: required for a local oracle, used for scoring otherwise.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Run all four ablation arms over several seeds.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        attack: AttackArgs,
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
    /// Sweep the per-class budget and write one CSV row per run.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        attack: AttackArgs,
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Comma-separated, strictly increasing budgets per class.
        #[arg(long)]
        budgets: Option<String>,
        /// Comma-separated attack modes.
        #[arg(long)]
        modes: Option<String>,
        /// Comma-separated label modes.
        #[arg(long)]
        label_modes: Option<String>,
        /// Record wall-clock time per run (makes output non-reproducible).
        #[arg(long)]
        timing: bool,
    },
    /// Score a student checkpoint or run report against a teacher.
    Eval {
        /// Student checkpoint or attack report JSON.
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

#[derive(Args)]
struct CommonArgs {
    /// TOML run document; flags given on the command line take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    budget_per_class: Option<usize>,
    #[arg(long)]
    calls_per_round: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    metric: Option<DistanceMetric>,
    #[arg(long)]
    label_mode: Option<LabelMode>,
    #[arg(long)]
    mode: Option<AttackMode>,
    /// A count (`5`), a range (`0..5`) or a list (`1,4,9`).
    #[arg(long)]
    seeds: Option<String>,
    /// `local` or the base URL of a running service.
    #[arg(long)]
    oracle: Option<String>,
}

#[derive(Args)]
struct ScenarioArgs {
    #[arg(long)]
    generator: Option<Generator>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    shift: Option<f64>,
    #[arg(long)]
    pool_per_class: Option<usize>,
    /// Seed of the hidden data and the teacher.
    #[arg(long)]
    data_seed: Option<u64>,
}

impl CommonArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = RunConfig::load_or_default(self.config.as_deref())?;
        if let Some(out) = &self.out {
            cfg.out = Some(out.clone());
        }
        if let Some(seed) = self.seed {
            cfg.attack.seed = seed;
        }
        if let Some(jobs) = self.jobs {
            cfg.jobs = jobs;
        }
        Ok(cfg)
    }
}

impl AttackArgs {
    fn apply(&self, cfg: &mut RunConfig) -> anyhow::Result<()> {
        let a = &mut cfg.attack;
        if let Some(v) = self.budget_per_class {
            a.per_class_budget = v;
        }
        if let Some(v) = self.calls_per_round {
            a.calls_per_round = Some(v);
        }
        if let Some(v) = self.k {
            a.k = v;
        }
        if let Some(v) = self.sigma {
            a.sigma = v;
        }
        if let Some(v) = self.metric {
            a.metric = Some(v);
        }
        if let Some(v) = self.label_mode {
            a.label_mode = v;
        }
        if let Some(v) = self.mode {
            a.mode = v;
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = parse_seeds(s)?;
            cfg.sweep.seeds = cfg.seeds.clone();
        }
        if let Some(o) = &self.oracle {
            cfg.oracle = o.clone();
        }
        Ok(())
    }
}

impl ScenarioArgs {
    fn apply(&self, spec: &mut ScenarioSpec) {
        let d = &mut spec.dataset;
        if let Some(v) = self.generator {
            d.generator = v;
        }
        if let Some(v) = self.classes {
            d.num_classes = v;
        }
        if let Some(v) = self.dim {
            d.input_dim = v;
        }
        if let Some(v) = self.separation {
            d.class_separation = v;
        }
        if let Some(v) = self.noise {
            d.noise_scale = v;
        }
        if let Some(v) = self.data_seed {
            d.seed = v;
            spec.teacher_train.seed = v;
        }
        if let Some(v) = self.shift {
            spec.proxy_shift = v;
        }
        if let Some(v) = self.pool_per_class {
            spec.pool_per_class = v;
        }
    }
}

const SCENARIO_FILE: &str = "scenario.toml";

fn write_output(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn load_scenario_spec(dir: &Path) -> anyhow::Result<ScenarioSpec> {
    let path = dir.join(SCENARIO_FILE);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn gen_data(common: CommonArgs, scenario: ScenarioArgs) -> anyhow::Result<()> {
    let mut cfg = common.resolve()?;
    scenario.apply(&mut cfg.scenario);
    let dir = cfg.out.clone().context("gen-data needs --out <dir>")?;
    std::fs::create_dir_all(&dir)?;
    let spec = &cfg.scenario;
    let (train, test) = generate_true_dataset(&spec.dataset, &mut seeded_rng(spec.dataset.seed))?;
    save_dataset(dir.join("train.csv"), &train)?;
    save_dataset(dir.join("test.csv"), &test)?;
    // The pool comes from the same generator the in-process harness uses.
    let pool = Scenario::with_teacher(
        spec.clone(),
        train.clone(),
        test.clone(),
        Network::zeros(spec.teacher_spec()?)?,
    )?
    .proxy_pool(cfg.attack.seed)?;
    save_pool(dir.join("pool.csv"), dir.join("pool.labels.csv"), &pool)?;
    std::fs::write(dir.join(SCENARIO_FILE), toml::to_string(spec)?)?;
    println!(
        "wrote {} train, {} test and {} pool samples to {}",
        train.len(),
        test.len(),
        pool.len(),
        dir.display()
    );
    Ok(())
}

fn train_teacher_cmd(common: CommonArgs, data: PathBuf) -> anyhow::Result<()> {
    let cfg = common.resolve()?;
    let out = cfg.out.clone().context("train-teacher needs --out <checkpoint>")?;
    let spec = load_scenario_spec(&data)?;
    let c = spec.dataset.num_classes;
    let train = load_dataset(data.join("train.csv"), c)?;
    let test = load_dataset(data.join("test.csv"), c)?;
    let mut train_cfg = spec.teacher_train.clone();
    if let Some(seed) = common.seed {
        train_cfg.seed = seed;
    }
    let (teacher, history) = train_teacher(&train, spec.teacher_spec()?, &train_cfg)?;
    teacher.save_checkpoint(&out)?;
    let acc = agreement_accuracy(&teacher, &test.features, &test.labels)?;
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": out,
            "epochs": history.epochs_run(),
            "test_accuracy": acc,
        })
    );
    Ok(())
}

fn serve_cmd(teacher: PathBuf, label_mode: LabelMode, budget: usize, bind: SocketAddr) -> anyhow::Result<()> {
    let handle = serve(&ServiceConfig {
        bind,
        checkpoint: teacher,
        label_mode,
        budget_limit: budget,
    })?;
    eprintln!("serving {label_mode} labels on {} (budget {budget})", handle.url());
    handle.wait()?;
    Ok(())
}

fn attack_cmd(common: CommonArgs, args: AttackArgs, data: PathBuf, teacher: Option<PathBuf>) -> anyhow::Result<()> {
    let mut cfg = common.resolve()?;
    args.apply(&mut cfg)?;
    let spec = load_scenario_spec(&data)?;
    let c = spec.dataset.num_classes;
    let mut pool = load_pool(data.join("pool.csv"), Some(&data.join("pool.labels.csv")), c)?;
    let test = load_dataset(data.join("test.csv"), c)?;
    let teacher = teacher.map(|p| Network::load_checkpoint(&p)).transpose()?;
    let n = cfg.attack.total_budget(c);

    let source: OracleSource = cfg.oracle.parse()?;
    let local;
    let remote;
    let oracle: &dyn Oracle = match &source {
        OracleSource::Local => {
            let t = teacher.clone().context("a local oracle needs --teacher")?;
            local = LocalOracle::new(t, cfg.attack.label_mode, n);
            &local
        }
        OracleSource::Remote(url) => {
            remote = RemoteOracle::connect(url)?;
            &remote
        }
    };
    if oracle.label_mode() != cfg.attack.label_mode {
        log::info!("using the oracle's {} labels", oracle.label_mode());
        cfg.attack.label_mode = oracle.label_mode();
    }

    // Diagnostics need unbudgeted teacher access, which only a local oracle offers.
    let mut diagnostics = match (&source, &teacher) {
        (OracleSource::Local, Some(t)) => Some(PseudoLabelDiagnostics::new(
            pool.features.iter().map(|x| t.predict(x)).collect::<Result<_, _>>()?,
        )),
        _ => None,
    };
    let mut noop = extraction_lab::aspkd::NoopObserver;
    let observer: &mut dyn extraction_lab::aspkd::RoundObserver = match diagnostics.as_mut() {
        Some(d) => d,
        None => &mut noop,
    };
    let student_spec = spec.student_spec()?;
    let outcome = run_aspkd_observed(
        oracle,
        &mut pool,
        &student_spec,
        &cfg.attack,
        &mut seeded_rng(cfg.attack.seed),
        observer,
    )?;
    let mut report: RunReport = outcome.report;
    if let Some(t) = &teacher {
        let labels: Vec<usize> = test.features.iter().map(|x| t.predict(x)).collect::<Result<_, _>>()?;
        report.agreement_accuracy = Some(agreement_accuracy(&outcome.student, &test.features, &labels)?);
    }
    eprintln!(
        "{} attack: {} calls in {} rounds, agreement {}",
        report.mode,
        report.calls_used,
        report.rounds.len(),
        report.agreement_accuracy.map_or("n/a".to_owned(), |a| format!("{a:.4}"))
    );
    write_output(cfg.out.as_deref(), &report.to_json())
}

fn build_scenario(cfg: &RunConfig) -> anyhow::Result<Scenario> {
    let scenario = Scenario::build(cfg.scenario.clone())?;
    eprintln!("teacher test accuracy {:.4}", scenario.teacher_test_accuracy);
    Ok(scenario)
}

fn require_local(cfg: &RunConfig, command: &str) -> anyhow::Result<()> {
    if cfg.oracle.parse::<OracleSource>()? != OracleSource::Local {
        bail!("{command} trains its own teacher and gives every run a fresh budget; it only supports --oracle local");
    }
    Ok(())
}

fn ablate_cmd(common: CommonArgs, args: AttackArgs, scenario_args: ScenarioArgs) -> anyhow::Result<()> {
    let mut cfg = common.resolve()?;
    args.apply(&mut cfg)?;
    scenario_args.apply(&mut cfg.scenario);
    require_local(&cfg, "ablate")?;
    let scenario = build_scenario(&cfg)?;
    let rows = run_ablation(&scenario, &cfg.attack, &cfg.seeds, cfg.jobs, false)?;
    for r in rows.iter().filter(|r| r.kind == RowKind::Aggregate) {
        eprintln!(
            "{:>10}: {:.4} ± {:.4} ({})",
            r.mode,
            r.agreement_accuracy.unwrap_or(f64::NAN),
            r.agreement_accuracy_std.unwrap_or(f64::NAN),
            r.status
        );
    }
    write_output(cfg.out.as_deref(), &to_csv_string(&rows))
}

fn parse_list<T: std::str::FromStr>(s: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|e| anyhow::anyhow!("{p:?}: {e}")))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn sweep_cmd(
    common: CommonArgs,
    args: AttackArgs,
    scenario_args: ScenarioArgs,
    budgets: Option<String>,
    modes: Option<String>,
    label_modes: Option<String>,
    timing: bool,
) -> anyhow::Result<()> {
    let mut cfg = common.resolve()?;
    args.apply(&mut cfg)?;
    scenario_args.apply(&mut cfg.scenario);
    require_local(&cfg, "sweep")?;
    if let Some(b) = budgets {
        cfg.sweep.per_class_budgets = parse_budgets(&b)?;
    }
    if let Some(m) = modes {
        cfg.sweep.modes = parse_list(&m)?;
    } else if args.mode.is_some() {
        cfg.sweep.modes = vec![cfg.attack.mode];
    }
    if let Some(m) = label_modes {
        cfg.sweep.label_modes = parse_list(&m)?;
    } else if args.label_mode.is_some() {
        cfg.sweep.label_modes = vec![cfg.attack.label_mode];
    }
    cfg.sweep.record_timing |= timing;
    let scenario = build_scenario(&cfg)?;
    let rows: Vec<MetricsRow> = run_sweep(&scenario, &cfg.attack, &cfg.sweep, cfg.jobs)?;
    let failed = rows.iter().filter(|r| r.kind == RowKind::Detail && !r.is_ok()).count();
    if failed > 0 {
        eprintln!("{failed} run(s) failed; see the status column");
    }
    write_output(cfg.out.as_deref(), &to_csv_string(&rows))
}

fn eval_cmd(student: PathBuf, teacher: PathBuf, data: PathBuf) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&student).with_context(|| format!("reading {}", student.display()))?;
    let student = match RunReport::from_json(&text) {
        Ok(report) => report.student,
        Err(_) => Network::from_checkpoint_str(&text).context("student is neither a report nor a checkpoint")?,
    };
    let teacher = Network::load_checkpoint(&teacher)?;
    let c = teacher.spec().num_classes;
    let test = load_dataset(data.join("test.csv"), c)?;
    let labels: Vec<usize> = test.features.iter().map(|x| teacher.predict(x)).collect::<Result<_, _>>()?;
    let acc = agreement_accuracy(&student, &test.features, &labels)?;
    println!("{}", serde_json::json!({ "agreement_accuracy": acc, "test_samples": test.len() }));
    Ok(())
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EXTRACTION_LAB_LOG", "warn")).init();
    match Cli::parse().command {
        Command::GenData { common, scenario } => gen_data(common, scenario),
        Command::TrainTeacher { common, data } => train_teacher_cmd(common, data),
        Command::Serve {
            teacher,
            label_mode,
            budget,
            bind,
        } => serve_cmd(teacher, label_mode, budget, bind),
        Command::Attack {
            common,
            attack,
            data,
            teacher,
        } => attack_cmd(common, attack, data, teacher),
        Command::Ablate {
            common,
            attack,
            scenario,
        } => ablate_cmd(common, attack, scenario),
        Command::Sweep {
            common,
            attack,
            scenario,
            budgets,
            modes,
            label_modes,
            timing,
        } => sweep_cmd(common, attack, scenario, budgets, modes, label_modes, timing),
        Command::Eval { student, teacher, data } => eval_cmd(student, teacher, data),
    }
}
