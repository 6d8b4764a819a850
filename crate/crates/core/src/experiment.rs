//! Run configuration, dataset and model construction, single runs, sweeps
//! and the comparison of replicated runs against a baseline.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_cifar_batch, load_idx, synth_blobs, synth_two_level, DatasetHandle};
use crate::error::{Error, Result};
use crate::models::{ConstantFit, LeastSquares, Mlp, Model, NoisyQuadratic, NoisyQuadraticSpec, SoftmaxRegression};
use crate::par::{self, Execution};
use crate::protocol::{
    run_easgd, run_mwu, run_simuparallel, run_wasgd_plus_async, run_wasgd_plus_sync, run_wasgd_sync, Checkpoint,
    CommConfig, CsvRow, EngineKind, OrderPolicy, RunOptions, TrajectoryLog,
};

/// Version of the trajectory and comparison CSV layouts.
pub const CSV_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolId {
    #[serde(rename = "wasgd+")]
    WasgdPlus,
    #[serde(rename = "wasgd+async")]
    WasgdPlusAsync,
    Wasgd,
    Omwu,
    Mmwu,
    Easgd,
    Simuparallel,
}

impl ProtocolId {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "wasgd+" | "wasgd-plus" => Self::WasgdPlus,
            "wasgd+async" | "wasgd-plus-async" => Self::WasgdPlusAsync,
            "wasgd" => Self::Wasgd,
            "omwu" => Self::Omwu,
            "mmwu" => Self::Mmwu,
            "easgd" => Self::Easgd,
            "simuparallel" => Self::Simuparallel,
            _ => return Err(Error::config(format!("unknown protocol {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelId {
    Softmax,
    Mlp,
    ConstantFit,
    LeastSquares,
    Quadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Blobs,
    TwoLevel,
    Idx,
    Cifar10,
    Cifar100,
    /// Pre-drawn noise for the noisy quadratic.
    QuadraticNoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderId {
    /// The protocol's own order.
    Default,
    Scored,
    Shuffled,
    Identity,
    Grouped,
}

/// Everything a run needs, as one flat table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub protocol: ProtocolId,
    pub model: ModelId,
    /// MLP hidden width.
    pub hidden: usize,
    /// Constant-fit and quadratic starting value.
    pub init: f64,
    /// Quadratic dimension.
    pub dim: usize,

    pub dataset: DatasetKind,
    pub data_seed: u64,
    pub classes: usize,
    pub per_class: usize,
    pub features: usize,
    pub spread: f64,
    pub count: usize,
    pub level_a: f64,
    pub level_b: f64,
    pub curvature: f64,
    pub sigma_b: f64,
    pub sigma_h: f64,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub batch: Option<PathBuf>,
    pub test_batch: Option<PathBuf>,
    /// Keep at most this many training samples.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    /// Moves this many trailing training samples to the test split.
    pub hold_out: usize,

    pub p: usize,
    pub b: usize,
    pub tau: usize,
    pub beta: f64,
    pub a_tilde: f64,
    pub eta: f64,
    pub m: usize,
    pub c: usize,
    pub n: usize,
    pub zeta: Option<f64>,
    pub alpha: Option<f64>,
    pub seed: u64,

    pub order: OrderId,
    /// Run length for the grouped order.
    pub delta: usize,
    pub epochs: usize,
    pub loss_threshold: Option<f64>,
    pub checkpoint_every: u64,
    pub engine: EngineKind,
    pub sequential: bool,
    pub wall_clock: bool,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let comm = CommConfig::default();
        let mut cfg = Self {
            protocol: ProtocolId::WasgdPlus,
            model: ModelId::Softmax,
            hidden: 32,
            init: 0.0,
            dim: 1,
            dataset: DatasetKind::Blobs,
            data_seed: 0,
            classes: 10,
            per_class: 200,
            features: 20,
            spread: 1.0,
            count: 12,
            level_a: 0.0,
            level_b: 2.0,
            curvature: 1.0,
            sigma_b: 0.5,
            sigma_h: 1.0,
            images: None,
            labels: None,
            test_images: None,
            test_labels: None,
            batch: None,
            test_batch: None,
            train_limit: None,
            test_limit: None,
            hold_out: 0,
            p: 0,
            b: 0,
            tau: 0,
            beta: 0.0,
            a_tilde: 0.0,
            eta: 0.0,
            m: 0,
            c: 0,
            n: 0,
            zeta: None,
            alpha: None,
            seed: 0,
            order: OrderId::Default,
            delta: 1,
            epochs: 1,
            loss_threshold: None,
            checkpoint_every: 1000,
            engine: EngineKind::Simulation,
            sequential: false,
            wall_clock: false,
            output: None,
        };
        cfg.set_comm(&comm);
        cfg
    }
}

impl RunConfig {
    pub fn comm(&self) -> CommConfig {
        CommConfig {
            p: self.p,
            b: self.b,
            tau: self.tau,
            beta: self.beta,
            a_tilde: self.a_tilde,
            eta: self.eta,
            m: self.m,
            c: self.c,
            n: self.n,
            zeta: self.zeta,
            alpha: self.alpha,
            seed: self.seed,
        }
    }

    pub fn set_comm(&mut self, c: &CommConfig) {
        self.p = c.p;
        self.b = c.b;
        self.tau = c.tau;
        self.beta = c.beta;
        self.a_tilde = c.a_tilde;
        self.eta = c.eta;
        self.m = c.m;
        self.c = c.c;
        self.n = c.n;
        self.zeta = c.zeta;
        self.alpha = c.alpha;
        self.seed = c.seed;
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.comm().validate()?;
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint interval must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.order == OrderId::Grouped && self.delta == 0 {
            return Err(Error::config("delta must be at least 1"));
        }
        Ok(())
    }

    pub fn run_options(&self) -> RunOptions {
        let order = match self.order {
            OrderId::Default => None,
            OrderId::Scored => Some(OrderPolicy::Scored),
            OrderId::Shuffled => Some(OrderPolicy::Shuffled),
            OrderId::Identity => Some(OrderPolicy::Identity),
            OrderId::Grouped => Some(OrderPolicy::Grouped { delta: self.delta }),
        };
        RunOptions {
            epochs: self.epochs,
            loss_threshold: self.loss_threshold,
            checkpoint_every: self.checkpoint_every,
            execution: if self.sequential {
                Execution::Sequential
            } else {
                Execution::Parallel
            },
            engine: self.engine,
            wall_clock: self.wall_clock,
            order,
            ..Default::default()
        }
    }

    fn path<'a>(&self, p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        p.as_deref()
            .ok_or_else(|| Error::config(format!("dataset {:?} needs `{key}`", self.dataset)))
    }

    pub fn load_dataset(&self) -> Result<DatasetHandle> {
        let data = match self.dataset {
            DatasetKind::Blobs => {
                synth_blobs(self.classes, self.per_class, self.features, self.spread, self.data_seed)?
            }
            DatasetKind::TwoLevel => synth_two_level(self.count, self.level_a, self.level_b)?,
            DatasetKind::QuadraticNoise => {
                let spec = NoisyQuadraticSpec::new(self.curvature, self.sigma_b, self.sigma_h)?;
                DatasetHandle::new(spec.noise_samples(self.count, self.data_seed), 0)?
            }
            DatasetKind::Idx => {
                let train = load_idx(self.path(&self.images, "images")?, self.path(&self.labels, "labels")?)?;
                match (&self.test_images, &self.test_labels) {
                    (Some(i), Some(l)) => join(train, load_idx(i, l)?)?,
                    (None, None) => train,
                    _ => return Err(Error::config("test_images and test_labels go together")),
                }
            }
            DatasetKind::Cifar10 | DatasetKind::Cifar100 => {
                let classes = if self.dataset == DatasetKind::Cifar10 { 10 } else { 100 };
                let train = load_cifar_batch(self.path(&self.batch, "batch")?, classes)?;
                match &self.test_batch {
                    Some(t) => join(train, load_cifar_batch(t, classes)?)?,
                    None => train,
                }
            }
        };
        let data = if self.hold_out > 0 {
            data.hold_out(self.hold_out)?
        } else {
            data
        };
        let train = self.train_limit.unwrap_or(usize::MAX).min(data.train().len());
        let test = self.test_limit.unwrap_or(usize::MAX).min(data.test().len());
        data.truncate(train, test)
    }

    pub fn build_model(&self, data: &DatasetHandle) -> Result<Box<dyn Model>> {
        let classes = data.num_classes;
        let needs_classes = || {
            if classes < 2 {
                Err(Error::config(format!(
                    "{:?} needs a classification dataset",
                    self.model
                )))
            } else {
                Ok(())
            }
        };
        Ok(match self.model {
            ModelId::Softmax => {
                needs_classes()?;
                Box::new(SoftmaxRegression::new(data.feature_dim, classes))
            }
            ModelId::Mlp => {
                needs_classes()?;
                if self.hidden == 0 {
                    return Err(Error::config("hidden must be at least 1"));
                }
                Box::new(Mlp::new(data.feature_dim, self.hidden, classes))
            }
            ModelId::ConstantFit => Box::new(ConstantFit { init: self.init }),
            ModelId::LeastSquares => Box::new(LeastSquares {
                features: data.feature_dim,
            }),
            ModelId::Quadratic => Box::new(NoisyQuadratic {
                c: self.curvature,
                dim: self.dim,
                init: self.init,
            }),
        })
    }
}

fn join(train: DatasetHandle, test: DatasetHandle) -> Result<DatasetHandle> {
    if train.feature_dim != test.feature_dim {
        return Err(Error::format("train and test files differ in feature size"));
    }
    let classes = train.num_classes.max(test.num_classes);
    let n = train.train().len();
    let mut samples = train.train().to_vec();
    samples.extend_from_slice(test.train());
    DatasetHandle::with_split(samples, n, classes)
}

/// Runs one configured experiment on already loaded data.
pub fn run_with_data(cfg: &RunConfig, model: &dyn Model, data: &DatasetHandle) -> Result<TrajectoryLog> {
    cfg.validate()?;
    let comm = cfg.comm();
    let opts = cfg.run_options();
    if opts.engine == EngineKind::Threaded
        && !matches!(
            cfg.protocol,
            ProtocolId::WasgdPlus | ProtocolId::WasgdPlusAsync | ProtocolId::Wasgd
        )
    {
        return Err(Error::config(format!(
            "{:?} runs on the simulation engine only",
            cfg.protocol
        )));
    }
    match cfg.protocol {
        ProtocolId::WasgdPlus => run_wasgd_plus_sync(model, data, &comm, &opts),
        ProtocolId::WasgdPlusAsync => run_wasgd_plus_async(model, data, &comm, &opts),
        ProtocolId::Wasgd => run_wasgd_sync(model, data, &comm, &opts),
        ProtocolId::Omwu => run_mwu(model, data, &comm, false, &opts),
        ProtocolId::Mmwu => run_mwu(model, data, &comm, true, &opts),
        ProtocolId::Easgd => run_easgd(model, data, &comm, &opts),
        ProtocolId::Simuparallel => run_simuparallel(model, data, &comm, &opts),
    }
}

/// Loads the data, runs, and writes the CSV to `cfg.output` when set.
pub fn run_experiment(cfg: &RunConfig) -> Result<TrajectoryLog> {
    cfg.validate()?;
    let data = cfg.load_dataset()?;
    let model = cfg.build_model(&data)?;
    let log = run_with_data(cfg, model.as_ref(), &data)?;
    if let Some(path) = &cfg.output {
        log.save_csv(path)?;
    }
    Ok(log)
}

/// Which value of a checkpoint the comparison uses. Lower is better for
/// all of them, so a candidate worse than the baseline scores negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    #[default]
    TrainLoss,
    TrainError,
    TestLoss,
    TestError,
}

impl Metric {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "train-loss" => Self::TrainLoss,
            "train-error" => Self::TrainError,
            "test-loss" => Self::TestLoss,
            "test-error" => Self::TestError,
            _ => return Err(Error::config(format!("unknown metric {s:?}"))),
        })
    }

    pub fn value(self, c: &Checkpoint) -> Option<f64> {
        match self {
            Self::TrainLoss => Some(c.train_loss),
            Self::TrainError => c.train_err,
            Self::TestLoss => c.test_loss,
            Self::TestError => c.test_err,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Mean over candidate replicas of the per-record mean of
    /// `baseline average − candidate`.
    pub mean_difference: f64,
    /// Population variance of the per-replica differences.
    pub variance: f64,
    pub per_replica: Vec<f64>,
    /// Set when there is one candidate replica; the variance is then 0.
    pub single_replica: bool,
    /// Checkpoints per run.
    pub records: usize,
}

fn series(log: &TrajectoryLog, metric: Metric) -> Result<Vec<f64>> {
    log.checkpoints
        .iter()
        .map(|c| {
            metric
                .value(c)
                .ok_or_else(|| Error::Alignment(format!("{metric:?} missing at step {}", c.step)))
        })
        .collect()
}

/// Compares replicated candidate runs with replicated baseline runs at
/// every checkpoint. All runs must share one checkpoint grid.
pub fn compare_runs(baseline: &[TrajectoryLog], candidate: &[TrajectoryLog], metric: Metric) -> Result<Comparison> {
    if baseline.is_empty() || candidate.is_empty() {
        return Err(Error::Alignment("nothing to compare".into()));
    }
    let grid: Vec<u64> = baseline[0].checkpoints.iter().map(|c| c.step).collect();
    if grid.is_empty() {
        return Err(Error::Alignment("runs have no checkpoints".into()));
    }
    for log in baseline.iter().chain(candidate) {
        if !log.checkpoints.iter().map(|c| c.step).eq(grid.iter().copied()) {
            return Err(Error::Alignment(format!(
                "{} (seed {}) has a different checkpoint grid",
                log.protocol, log.seed
            )));
        }
    }
    let n = grid.len();
    let mut avg = vec![0.0; n];
    for log in baseline {
        for (a, v) in avg.iter_mut().zip(series(log, metric)?) {
            *a += v;
        }
    }
    avg.iter_mut().for_each(|a| *a /= baseline.len() as f64);
    let per_replica = candidate
        .iter()
        .map(|log| {
            let v = series(log, metric)?;
            Ok(avg.iter().zip(&v).map(|(a, v)| a - v).sum::<f64>() / n as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let k = per_replica.len() as f64;
    let mean_difference = per_replica.iter().sum::<f64>() / k;
    let variance = per_replica.iter().map(|d| (d - mean_difference).powi(2)).sum::<f64>() / k;
    Ok(Comparison {
        mean_difference,
        variance,
        single_replica: per_replica.len() == 1,
        per_replica,
        records: n,
    })
}

/// One-sided sign test of "the differences are negative": the probability
/// of at least as many negative signs under a fair coin. Zeros are dropped.
pub fn sign_test_negative(diffs: &[f64]) -> f64 {
    let n = diffs.iter().filter(|d| **d != 0.0).count();
    let k = diffs.iter().filter(|d| **d < 0.0).count();
    let mut tail = 0.0;
    let mut binom = 1.0;
    for i in 0..=n {
        if i >= k {
            tail += binom;
        }
        binom = binom * (n - i) as f64 / (i + 1) as f64;
    }
    tail / 2f64.powi(n as i32)
}

/// A trajectory read back from CSV rows.
pub fn log_from_rows(rows: &[CsvRow]) -> Result<TrajectoryLog> {
    let first = rows
        .first()
        .ok_or_else(|| Error::format("trajectory file has no rows"))?;
    let mut log = TrajectoryLog::new(&first.protocol, first.p, first.seed);
    for r in rows {
        if r.protocol != first.protocol || r.p != first.p || r.seed != first.seed {
            return Err(Error::format("trajectory file mixes runs"));
        }
        log.checkpoints.push(Checkpoint {
            step: r.step,
            wall_ms: r.wall_ms,
            train_loss: r.train_loss,
            train_err: r.train_err,
            test_loss: r.test_loss,
            test_err: r.test_err,
        });
    }
    Ok(log)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParam {
    Beta,
    /// `T = 1/ã`.
    Temperature,
    M,
    Tau,
    Delta,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            Self::Beta => "beta",
            Self::Temperature => "T",
            Self::M => "m",
            Self::Tau => "tau",
            Self::Delta => "delta",
        }
    }

    /// The configuration with this parameter set to `v`.
    pub fn apply(self, cfg: &RunConfig, v: f64) -> Result<RunConfig> {
        let mut c = cfg.clone();
        let count = || {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::config(format!(
                    "{} must be a positive integer, got {v}",
                    self.name()
                )))
            }
        };
        match self {
            Self::Beta => c.beta = v,
            Self::Temperature => {
                if !(v > 0.0) {
                    return Err(Error::config(format!("T must be positive, got {v}")));
                }
                c.a_tilde = 1.0 / v;
            }
            Self::M => c.m = count()?,
            Self::Tau => c.tau = count()?,
            Self::Delta => {
                c.delta = count()?;
                c.order = OrderId::Grouped;
            }
        }
        Ok(c)
    }

    /// The baseline this sweep is compared with, if any: `β = 1` for the
    /// β sweep and equal weights (`ã = 0`) for the temperature sweep.
    pub fn baseline(self, cfg: &RunConfig) -> Option<RunConfig> {
        match self {
            Self::Beta => Some(RunConfig {
                beta: 1.0,
                ..cfg.clone()
            }),
            Self::Temperature => Some(RunConfig {
                a_tilde: 0.0,
                ..cfg.clone()
            }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub runs: Vec<TrajectoryLog>,
    pub comparison: Option<Comparison>,
}

impl SweepPoint {
    pub fn mean_final_loss(&self) -> f64 {
        self.runs.iter().map(TrajectoryLog::final_train_loss).sum::<f64>() / self.runs.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub param: SweepParam,
    pub baseline: Vec<TrajectoryLog>,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    /// One CSV per run plus `summary.csv` with one line per swept value.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let name = self.param.name();
        for (r, log) in self.baseline.iter().enumerate() {
            log.save_csv(&dir.join(format!("baseline_r{r}.csv")))?;
        }
        for pt in &self.points {
            for (r, log) in pt.runs.iter().enumerate() {
                log.save_csv(&dir.join(format!("{name}_{}_r{r}.csv", pt.value)))?;
            }
        }
        let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
        w.write_record([
            "param",
            "value",
            "replicas",
            "mean_final_train_loss",
            "mean_difference",
            "variance",
            "single_replica",
        ])?;
        for pt in &self.points {
            let (md, var, single) = match &pt.comparison {
                Some(c) => (
                    c.mean_difference.to_string(),
                    c.variance.to_string(),
                    c.single_replica.to_string(),
                ),
                None => (String::new(), String::new(), String::new()),
            };
            w.write_record([
                name.to_string(),
                pt.value.to_string(),
                pt.runs.len().to_string(),
                pt.mean_final_loss().to_string(),
                md,
                var,
                single,
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs every swept value (and the baseline, where the sweep has one) with
/// seeds `cfg.seed + r` for `r < replicas`. Runs are independent and are
/// spread over the available threads.
pub fn sweep(
    cfg: &RunConfig,
    param: SweepParam,
    values: &[f64],
    replicas: usize,
    metric: Metric,
) -> Result<SweepResult> {
    if replicas == 0 || values.is_empty() {
        return Err(Error::config("a sweep needs values and at least one replica"));
    }
    cfg.validate()?;
    let data = cfg.load_dataset()?;
    let model = cfg.build_model(&data)?;
    let base = param.baseline(cfg);
    let mut configs = Vec::new();
    if let Some(b) = &base {
        configs.extend((0..replicas).map(|r| seeded(b, r)));
    }
    for &v in values {
        let c = param.apply(cfg, v)?;
        c.validate()?;
        configs.extend((0..replicas).map(|r| seeded(&c, r)));
    }
    let exec = if cfg.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let mut logs = par::map(exec, &configs, |c| run_with_data(c, model.as_ref(), &data))
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .into_iter();
    let baseline: Vec<TrajectoryLog> = if base.is_some() {
        logs.by_ref().take(replicas).collect()
    } else {
        Vec::new()
    };
    let points = values
        .iter()
        .map(|&value| {
            let runs: Vec<TrajectoryLog> = logs.by_ref().take(replicas).collect();
            let comparison = if baseline.is_empty() {
                None
            } else {
                Some(compare_runs(&baseline, &runs, metric)?)
            };
            Ok(SweepPoint {
                value,
                runs,
                comparison,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SweepResult {
        param,
        baseline,
        points,
    })
}

fn seeded(cfg: &RunConfig, r: usize) -> RunConfig {
    let mut c = cfg.clone();
    c.seed = cfg.seed.wrapping_add(r as u64);
    c.output = None;
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log_with(seed: u64, values: &[(u64, f64)]) -> TrajectoryLog {
        let mut log = TrajectoryLog::new("wasgd+", 2, seed);
        for &(step, loss) in values {
            log.checkpoints.push(Checkpoint {
                step,
                wall_ms: 0.0,
                train_loss: loss,
                train_err: None,
                test_loss: None,
                test_err: None,
            });
        }
        log
    }

    #[test]
    fn hand_computed_comparison() {
        // Baseline averages: 1.0 and 0.5. Candidate 1: (1.2, 0.7) → −0.2.
        // Candidate 2: (1.0, 0.3) → (0 + 0.2)/2 = 0.1.
        let base = [log_with(0, &[(0, 1.1), (10, 0.4)]), log_with(1, &[(0, 0.9), (10, 0.6)])];
        let cand = [log_with(0, &[(0, 1.2), (10, 0.7)]), log_with(1, &[(0, 1.0), (10, 0.3)])];
        let c = compare_runs(&base, &cand, Metric::TrainLoss).unwrap();
        assert!((c.per_replica[0] + 0.2).abs() < 1e-12);
        assert!((c.per_replica[1] - 0.1).abs() < 1e-12);
        assert!((c.mean_difference + 0.05).abs() < 1e-12);
        assert!((c.variance - 0.0225).abs() < 1e-12);
        assert!(!c.single_replica);
    }

    #[test]
    fn self_comparison_and_single_replica() {
        let base = [log_with(0, &[(0, 1.0), (5, 0.2)]), log_with(1, &[(0, 3.0), (5, 0.4)])];
        let c = compare_runs(&base, &base, Metric::TrainLoss).unwrap();
        assert!(c.mean_difference.abs() < 1e-15);
        // Per-replica: (2 − 1 + 0.3 − 0.2)/2 = 0.55 and −0.55.
        assert!((c.variance - 0.3025).abs() < 1e-12);
        let one = compare_runs(&base, &base[..1], Metric::TrainLoss).unwrap();
        assert!(one.single_replica);
        assert_eq!(one.variance, 0.0);
    }

    #[test]
    fn grid_mismatch_is_an_alignment_error() {
        let a = [log_with(0, &[(0, 1.0), (5, 0.2)])];
        let b = [log_with(0, &[(0, 1.0), (6, 0.2)])];
        assert!(matches!(
            compare_runs(&a, &b, Metric::TrainLoss),
            Err(Error::Alignment(_))
        ));
        assert!(matches!(
            compare_runs(&a, &a, Metric::TestLoss),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn sign_test_tail() {
        assert!((sign_test_negative(&[-1.0; 5]) - 1.0 / 32.0).abs() < 1e-15);
        assert!((sign_test_negative(&[-1.0, -1.0, -1.0, -1.0, 1.0]) - 6.0 / 32.0).abs() < 1e-15);
        assert_eq!(sign_test_negative(&[1.0, 2.0]), 1.0);
        assert_eq!(sign_test_negative(&[]), 1.0);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = RunConfig {
            protocol: ProtocolId::Easgd,
            order: OrderId::Grouped,
            delta: 10,
            zeta: None,
            alpha: Some(0.01),
            output: Some("out/run.csv".into()),
            ..Default::default()
        };
        let text = cfg.to_toml().unwrap();
        assert!(text.contains("protocol = \"easgd\""));
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn small_run_is_deterministic() {
        let cfg = RunConfig {
            per_class: 20,
            classes: 3,
            features: 4,
            hold_out: 12,
            tau: 8,
            m: 4,
            checkpoint_every: 16,
            epochs: 2,
            ..Default::default()
        };
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.to_csv_string().unwrap(), b.to_csv_string().unwrap());
        assert!(a.checkpoints[0].test_loss.is_some());
        assert!(a.final_train_loss() < a.checkpoints[0].train_loss);
    }

    #[test]
    fn sweep_values_must_fit_the_parameter() {
        let cfg = RunConfig::default();
        assert!(SweepParam::Tau.apply(&cfg, 2.5).is_err());
        assert!(SweepParam::Temperature.apply(&cfg, 0.0).is_err());
        let c = SweepParam::Delta.apply(&cfg, 10.0).unwrap();
        assert_eq!((c.order, c.delta), (OrderId::Grouped, 10));
        assert_eq!(SweepParam::Temperature.apply(&cfg, 0.5).unwrap().a_tilde, 2.0);
    }
}
