use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wasgd::experiment::{
    compare_runs, log_from_rows, run_experiment, sign_test_negative, sweep, DatasetKind, Metric, ModelId, OrderId,
    ProtocolId, RunConfig, SweepParam,
};
use wasgd::par::Execution;
use wasgd::protocol::{read_csv, EngineKind, TrajectoryLog};
use wasgd::variance::{asymptotic_variance, simulate_variance, MonteCarloOptions, VarianceSpec};
use wasgd::weighting::WeightVector;
use wasgd::{Error, Result};

#[derive(Parser)]
#[command(name = "wasgd", version, about = "Weighted-aggregating parallel SGD experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One training run; the CSV goes to `--output` or stdout.
    #[command(allow_negative_numbers = true)]
    Run(ConfigArgs),
    /// Acceptance β against the β = 1 baseline.
    #[command(name = "sweep-beta", allow_negative_numbers = true)]
    SweepBeta(SweepArgs),
    /// Temperature T = 1/ã against equal weights.
    #[command(name = "sweep-T", allow_negative_numbers = true)]
    SweepT(SweepArgs),
    /// Estimation sample size m.
    #[command(name = "sweep-m", allow_negative_numbers = true)]
    SweepM(SweepArgs),
    /// Communication period τ.
    #[command(name = "sweep-tau", allow_negative_numbers = true)]
    SweepTau(SweepArgs),
    /// Same-label run length δ of the grouped order.
    #[command(name = "sweep-delta", allow_negative_numbers = true)]
    SweepDelta(SweepArgs),
    /// Closed-form and simulated stationary variance on the noisy quadratic.
    #[command(name = "variance-lab", allow_negative_numbers = true)]
    VarianceLab(VarianceArgs),
    /// Compares candidate run CSVs with baseline run CSVs.
    #[command(allow_negative_numbers = true)]
    Compare(CompareArgs),
}

macro_rules! toml_parser {
    ($name:ident, $t:ty) => {
        fn $name(s: &str) -> std::result::Result<$t, String> {
            toml::Value::String(s.to_string())
                .try_into()
                .map_err(|e| format!("{e}"))
        }
    };
}
toml_parser!(parse_model, ModelId);
toml_parser!(parse_dataset, DatasetKind);
toml_parser!(parse_order, OrderId);
toml_parser!(parse_engine, EngineKind);

fn parse_protocol(s: &str) -> std::result::Result<ProtocolId, String> {
    ProtocolId::parse(s).map_err(|e| e.to_string())
}

fn parse_metric(s: &str) -> std::result::Result<Metric, String> {
    Metric::parse(s).map_err(|e| e.to_string())
}

/// A TOML config plus one override flag per config key.
#[derive(Args)]
struct ConfigArgs {
    /// TOML file with any subset of the keys below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the effective config as TOML and exit.
    #[arg(long)]
    dump_config: bool,

    #[arg(long, value_parser = parse_protocol)]
    protocol: Option<ProtocolId>,
    #[arg(long, value_parser = parse_model)]
    model: Option<ModelId>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    init: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,

    #[arg(long, value_parser = parse_dataset)]
    dataset: Option<DatasetKind>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    features: Option<usize>,
    #[arg(long)]
    spread: Option<f64>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    level_a: Option<f64>,
    #[arg(long)]
    level_b: Option<f64>,
    #[arg(long)]
    curvature: Option<f64>,
    #[arg(long)]
    sigma_b: Option<f64>,
    #[arg(long)]
    sigma_h: Option<f64>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    test_images: Option<PathBuf>,
    #[arg(long)]
    test_labels: Option<PathBuf>,
    #[arg(long)]
    batch: Option<PathBuf>,
    #[arg(long)]
    test_batch: Option<PathBuf>,
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    test_limit: Option<usize>,
    #[arg(long)]
    hold_out: Option<usize>,

    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    b: Option<usize>,
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    a_tilde: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    c: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    zeta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,

    #[arg(long, value_parser = parse_order)]
    order: Option<OrderId>,
    #[arg(long)]
    delta: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    loss_threshold: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long, value_parser = parse_engine)]
    engine: Option<EngineKind>,
    #[arg(long)]
    sequential: bool,
    #[arg(long)]
    wall_clock: bool,
    #[arg(long)]
    output: Option<PathBuf>,
}

macro_rules! override_plain {
    ($cfg:ident, $a:ident; $($f:ident),*) => {
        $(if let Some(v) = $a.$f.clone() { $cfg.$f = v; })*
    };
}

macro_rules! override_option {
    ($cfg:ident, $a:ident; $($f:ident),*) => {
        $(if $a.$f.is_some() { $cfg.$f = $a.$f.clone(); })*
    };
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let a = self;
        override_plain!(cfg, a; protocol, model, hidden, init, dim, dataset, data_seed, classes, per_class,
            features, spread, count, level_a, level_b, curvature, sigma_b, sigma_h, hold_out, p, b, tau, beta,
            a_tilde, eta, m, c, n, seed, order, delta, epochs, checkpoint_every, engine);
        override_option!(cfg, a; images, labels, test_images, test_labels, batch, test_batch, train_limit,
            test_limit, zeta, alpha, loss_threshold, output);
        cfg.sequential |= self.sequential;
        cfg.wall_clock |= self.wall_clock;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Comma-separated values; each sweep has a default list.
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,
    /// Runs per value, seeds `seed`, `seed + 1`, ...
    #[arg(long, default_value_t = 5)]
    replicas: usize,
    /// train-loss, train-error, test-loss or test-error.
    #[arg(long, default_value = "train-loss", value_parser = parse_metric)]
    metric: Metric,
    /// Directory for the per-run CSVs and summary.csv.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct VarianceArgs {
    #[arg(long, default_value_t = 1.0)]
    c: f64,
    #[arg(long, default_value_t = 0.1)]
    eta: f64,
    #[arg(long, default_value_t = 0.5)]
    sigma_b: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_h: f64,
    /// Per-step exchange probability in (0, 1].
    #[arg(long, default_value_t = 0.5)]
    zeta: f64,
    /// Worker count for equal weights; ignored with `--theta`.
    #[arg(long, default_value_t = 4)]
    p: usize,
    /// Comma-separated aggregation weights.
    #[arg(long, value_delimiter = ',')]
    theta: Vec<f64>,
    #[arg(long, default_value_t = 200_000)]
    steps: u64,
    #[arg(long, default_value_t = 200)]
    replicas: usize,
    #[arg(long, default_value_t = 0.5)]
    burn_in: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    sequential: bool,
    /// Skip the Monte-Carlo estimate.
    #[arg(long)]
    closed_form_only: bool,
    /// Report CSV path; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long, num_args = 1.., required = true)]
    baseline: Vec<PathBuf>,
    #[arg(long, num_args = 1.., required = true)]
    candidate: Vec<PathBuf>,
    #[arg(long, default_value = "train-loss", value_parser = parse_metric)]
    metric: Metric,
    /// Also print one line per candidate replica.
    #[arg(long)]
    per_replica: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run(args) => run(&args),
        Command::SweepBeta(a) => run_sweep(a, SweepParam::Beta, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]),
        Command::SweepT(a) => run_sweep(a, SweepParam::Temperature, &[1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0]),
        Command::SweepM(a) => run_sweep(a, SweepParam::M, &[1.0, 10.0, 100.0, 1000.0]),
        Command::SweepTau(a) => run_sweep(a, SweepParam::Tau, &[10.0, 100.0, 1000.0]),
        Command::SweepDelta(a) => run_sweep(a, SweepParam::Delta, &[1.0, 10.0, 100.0, 1000.0]),
        Command::VarianceLab(a) => variance_lab(&a),
        Command::Compare(a) => compare(&a),
    }
}

fn dump(cfg: &RunConfig) -> Result<()> {
    print!("{}", cfg.to_toml()?);
    Ok(())
}

fn run(args: &ConfigArgs) -> Result<()> {
    let cfg = args.resolve()?;
    if args.dump_config {
        return dump(&cfg);
    }
    let log = run_experiment(&cfg)?;
    match &cfg.output {
        Some(path) => eprintln!("{}", summary_line(&log, path)),
        None => print!("{}", log.to_csv_string()?),
    }
    Ok(())
}

fn summary_line(log: &TrajectoryLog, path: &Path) -> String {
    let step = log.last().map_or(0, |c| c.step);
    format!(
        "{} p={} seed={}: train loss {:.6} at step {step}, wrote {}",
        log.protocol,
        log.p,
        log.seed,
        log.final_train_loss(),
        path.display()
    )
}

fn run_sweep(args: SweepArgs, param: SweepParam, defaults: &[f64]) -> Result<()> {
    let cfg = args.cfg.resolve()?;
    if args.cfg.dump_config {
        return dump(&cfg);
    }
    let values = if args.values.is_empty() {
        defaults.to_vec()
    } else {
        args.values
    };
    let res = sweep(&cfg, param, &values, args.replicas, args.metric)?;
    res.save(&args.out_dir)?;
    print!("{}", std::fs::read_to_string(args.out_dir.join("summary.csv"))?);
    Ok(())
}

fn variance_lab(a: &VarianceArgs) -> Result<()> {
    let spec = if a.theta.is_empty() {
        VarianceSpec::equal(a.c, a.eta, a.sigma_b, a.sigma_h, a.zeta, a.p)?
    } else {
        VarianceSpec::new(
            a.c,
            a.eta,
            a.sigma_b,
            a.sigma_h,
            a.zeta,
            WeightVector::new(a.theta.clone())?,
        )?
    };
    let closed = asymptotic_variance(&spec)?;
    let (empirical, rel, replicas, steps) = if a.closed_form_only {
        (String::new(), String::new(), String::new(), String::new())
    } else {
        let opts = MonteCarloOptions {
            steps: a.steps,
            replicas: a.replicas,
            burn_in: a.burn_in,
            seed: a.seed,
            execution: if a.sequential {
                Execution::Sequential
            } else {
                Execution::Parallel
            },
        };
        let r = simulate_variance(&spec, &opts)?;
        (
            r.empirical_variance.to_string(),
            r.relative_error.to_string(),
            r.replicas.to_string(),
            r.steps.to_string(),
        )
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "c",
        "eta",
        "sigma_b",
        "sigma_h",
        "zeta",
        "p",
        "omega",
        "closed_form",
        "empirical_variance",
        "relative_error",
        "replicas",
        "steps",
    ])?;
    w.write_record([
        a.c.to_string(),
        a.eta.to_string(),
        a.sigma_b.to_string(),
        a.sigma_h.to_string(),
        a.zeta.to_string(),
        spec.p.to_string(),
        spec.omega().to_string(),
        closed.to_string(),
        empirical,
        rel,
        replicas,
        steps,
    ])?;
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    emit(&bytes, a.output.as_deref())
}

fn emit(bytes: &[u8], path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, bytes)?,
        None => std::io::stdout().write_all(bytes)?,
    }
    Ok(())
}

fn load_logs(paths: &[PathBuf]) -> Result<Vec<TrajectoryLog>> {
    paths.iter().map(|p| log_from_rows(&read_csv(p)?)).collect()
}

fn compare(a: &CompareArgs) -> Result<()> {
    let cmp = compare_runs(&load_logs(&a.baseline)?, &load_logs(&a.candidate)?, a.metric)?;
    let metric = toml::Value::try_from(a.metric).map_err(|e| Error::Config(e.to_string()))?;
    let metric = metric.as_str().unwrap_or_default().to_string();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "metric",
        "candidate",
        "records",
        "difference",
        "variance",
        "single_replica",
        "p_worse",
    ])?;
    if a.per_replica {
        for (path, d) in a.candidate.iter().zip(&cmp.per_replica) {
            w.write_record([
                metric.clone(),
                path.display().to_string(),
                cmp.records.to_string(),
                d.to_string(),
                String::new(),
                String::new(),
                String::new(),
            ])?;
        }
    }
    w.write_record([
        metric,
        "mean".to_string(),
        cmp.records.to_string(),
        cmp.mean_difference.to_string(),
        cmp.variance.to_string(),
        cmp.single_replica.to_string(),
        sign_test_negative(&cmp.per_replica).to_string(),
    ])?;
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    emit(&bytes, None)
}
