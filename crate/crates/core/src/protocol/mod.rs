//! The worker-pool engine and the protocols built on it.
//!
//! Every protocol runs `p` workers that each own their parameters, loss
//! energy, score board and random stream. Workers exchange
//! [`WorkerMessage`]s at communication points; between those points they
//! step independently.
//!
//! Two engines drive the workers. The simulation engine steps them in
//! lockstep from one coordinator (worker segments between communication
//! points may run on the rayon pool) and is bit-reproducible. The threaded
//! engine gives each worker its own thread and lets them talk over channels;
//! it is the only engine for the asynchronous backup-worker variant.

mod easgd;
mod engine;
mod log;
mod sequential;
mod simuparallel;
mod threaded;
mod worker;

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ParamVector;
use crate::par::Execution;
use crate::weighting::{record_index, RecordSchedule, WeightRule, WeightVector};

pub use easgd::{easgd_condition, easgd_sufficient_condition, run_easgd};
pub use engine::{run_mwu, run_wasgd_plus_sync, run_wasgd_sync, run_weighted};
pub use log::{read_csv, Checkpoint, CsvRow, RoundRecord, RunStats, TrajectoryLog, CSV_HEADER};
pub use sequential::{sequential_sgd, SequentialRun};
pub use simuparallel::run_simuparallel;
pub use threaded::run_wasgd_plus_async;

/// Protocol hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CommConfig {
    /// Workers whose messages enter each aggregation.
    pub p: usize,
    /// Backup workers (asynchronous variant only).
    pub b: usize,
    pub tau: usize,
    pub beta: f64,
    pub a_tilde: f64,
    pub eta: f64,
    pub m: usize,
    pub c: usize,
    /// Order chunks per epoch.
    pub n: usize,
    /// Per-step communication probability. When set, communication happens
    /// after a step with this probability instead of every `tau` steps.
    pub zeta: Option<f64>,
    /// EASGD moving rate; `0.009 / p` when unset.
    pub alpha: Option<f64>,
    pub seed: u64,
}

impl Default for CommConfig {
    fn default() -> Self {
        Self {
            p: 4,
            b: 0,
            tau: 1000,
            beta: 0.9,
            a_tilde: 1.0,
            eta: 0.01,
            m: 100,
            c: 2,
            n: 1,
            zeta: None,
            alpha: None,
            seed: 0,
        }
    }
}

impl CommConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.p == 0 {
            return fail("p must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return fail(format!("beta = {} outside [0, 1]", self.beta));
        }
        if self.tau == 0 {
            return fail("tau must be at least 1".into());
        }
        if self.m == 0 || self.m > self.tau {
            return fail(format!("m = {} must lie in 1..=tau ({})", self.m, self.tau));
        }
        if self.c == 0 || !self.m.is_multiple_of(self.c) || !self.tau.is_multiple_of(self.c) {
            return fail(format!(
                "c = {} must divide m = {} and tau = {}",
                self.c, self.m, self.tau
            ));
        }
        if self.n == 0 {
            return fail("n must be at least 1".into());
        }
        if let Some(z) = self.zeta {
            if !(0.0..=1.0).contains(&z) {
                return fail(format!("zeta = {z} outside [0, 1]"));
            }
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return fail(format!("eta = {} must be positive", self.eta));
        }
        if !self.a_tilde.is_finite() {
            return fail("a_tilde must be finite".into());
        }
        if let Some(a) = self.alpha {
            if !(a >= 0.0 && a.is_finite()) {
                return fail(format!("alpha = {a} must be >= 0"));
            }
        }
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(0.009 / self.p as f64)
    }

    pub fn record_schedule(&self) -> Result<RecordSchedule> {
        record_index(self.m, self.c, self.tau)
    }
}

/// What one worker sends at a communication point.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerMessage {
    pub loss_energy: f64,
    pub params: ParamVector,
    pub worker_index: usize,
}

/// `(1 − β) x + β a`, evaluated as `x + β (a − x)` so that `a = x` and
/// `β = 0` leave `x` unchanged bit for bit; `β = 1` returns `a` exactly.
#[inline]
pub fn blend(x: f64, a: f64, beta: f64) -> f64 {
    if beta == 1.0 {
        a
    } else {
        x + beta * (a - x)
    }
}

/// `(1 − β) x + β a − η g`.
pub fn local_step(x: &[f64], aggregate: &[f64], g: &[f64], beta: f64, eta: f64) -> ParamVector {
    x.iter()
        .zip(aggregate)
        .zip(g)
        .map(|((x, a), g)| blend(*x, *a, beta) - eta * g)
        .collect::<Vec<_>>()
        .into()
}

/// `Σ θⱼ xⱼ`, summed in worker-index order.
pub fn aggregate(messages: &[WorkerMessage], theta: &WeightVector) -> Result<ParamVector> {
    if messages.len() != theta.len() || messages.is_empty() {
        return Err(Error::config(format!(
            "{} messages for {} weights",
            messages.len(),
            theta.len()
        )));
    }
    let mut order: Vec<usize> = (0..messages.len()).collect();
    order.sort_by_key(|&k| messages[k].worker_index);
    let dim = messages[order[0]].params.dim();
    let params: Vec<&[f64]> = order
        .iter()
        .map(|&k| {
            let x = &messages[k].params;
            if x.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: x.dim(),
                });
            }
            Ok(&x[..])
        })
        .collect::<Result<_>>()?;
    Ok(weighted_sum(&params, theta.as_slice()))
}

/// `Σ θⱼ xⱼ` in the given order. Starts from the first term rather than
/// from zero so that a single input is reproduced bit for bit.
pub(crate) fn weighted_sum(params: &[&[f64]], theta: &[f64]) -> ParamVector {
    let mut out: Vec<f64> = params[0].iter().map(|v| theta[0] * v).collect();
    for (x, t) in params.iter().zip(theta).skip(1) {
        for (o, v) in out.iter_mut().zip(x.iter()) {
            *o += t * v;
        }
    }
    out.into()
}

/// How a worker orders the samples of each chunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderPolicy {
    /// Keep a chunk's order when its accumulated judge score is at most −1,
    /// reshuffle otherwise.
    Scored,
    /// Fresh random order for every chunk pass.
    Shuffled,
    /// Dataset order.
    Identity,
    /// Runs of `delta` same-label samples, regenerated every chunk pass.
    Grouped { delta: usize },
    /// One fixed order of the training indices per worker, reused every
    /// epoch and cut into chunks.
    Explicit(Vec<Vec<usize>>),
}

/// How worker parameters are combined at a communication point.
#[derive(Debug, Clone, PartialEq)]
pub enum Aggregation {
    /// Convex combination with weights from the rule.
    Weighted(WeightRule),
    /// Multiplicative weights over workers; each round every worker adopts
    /// the parameters of one worker drawn with probability proportional to
    /// its weight. `full_data` evaluates each worker on the whole training
    /// set instead of using its recorded loss energy.
    Multiplicative { a_tilde: f64, full_data: bool },
}

/// The parts in which the weighted protocols differ.
#[derive(Debug, Clone, PartialEq)]
pub struct Scheme {
    pub name: String,
    pub aggregation: Aggregation,
    pub beta: f64,
    pub schedule: RecordSchedule,
    pub order: OrderPolicy,
}

impl Scheme {
    pub fn wasgd_plus(cfg: &CommConfig) -> Result<Self> {
        Ok(Self {
            name: "wasgd+".into(),
            aggregation: Aggregation::Weighted(WeightRule::Boltzmann { a_tilde: cfg.a_tilde }),
            beta: cfg.beta,
            schedule: cfg.record_schedule()?,
            order: OrderPolicy::Scored,
        })
    }

    /// Inverse-loss weights, full acceptance, the last `m` steps of each
    /// period recorded, orders reshuffled every pass.
    pub fn wasgd(cfg: &CommConfig) -> Result<Self> {
        Ok(Self {
            name: "wasgd".into(),
            aggregation: Aggregation::Weighted(WeightRule::InverseLoss),
            beta: 1.0,
            schedule: record_index(cfg.m, 1, cfg.tau)?,
            order: OrderPolicy::Shuffled,
        })
    }

    pub fn mwu(cfg: &CommConfig, estimated: bool) -> Result<Self> {
        Ok(Self {
            name: if estimated { "mmwu" } else { "omwu" }.into(),
            aggregation: Aggregation::Multiplicative {
                a_tilde: cfg.a_tilde,
                full_data: !estimated,
            },
            beta: 1.0,
            schedule: cfg.record_schedule()?,
            order: OrderPolicy::Shuffled,
        })
    }
}

/// Which engine drives the workers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EngineKind {
    #[default]
    Simulation,
    Threaded,
}

/// Run controls that are not protocol hyperparameters.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub epochs: usize,
    /// Stop at the first checkpoint whose train loss is at or below this.
    pub loss_threshold: Option<f64>,
    /// Steps per worker between checkpoints.
    pub checkpoint_every: u64,
    pub execution: Execution,
    pub engine: EngineKind,
    /// Record wall time in simulation runs. Off by default so that logs are
    /// byte-reproducible.
    pub wall_clock: bool,
    /// Keep a [`RoundRecord`] per communication.
    pub diagnostics: bool,
    /// Extra `m` values whose estimates are compared against full-data
    /// weights at every communication (simulation engine only).
    pub estimation_probes: Vec<usize>,
    /// Overrides the protocol's default sample order.
    pub order: Option<OrderPolicy>,
    /// Overrides the common initial parameters, one vector per worker.
    pub inits: Option<Vec<ParamVector>>,
    /// Artificial per-step delay for each worker (threaded engine).
    pub step_delays: Vec<Duration>,
    /// Longest a threaded worker waits for one round's messages.
    pub round_timeout: Duration,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            epochs: 1,
            loss_threshold: None,
            checkpoint_every: 1000,
            execution: Execution::default(),
            engine: EngineKind::default(),
            wall_clock: false,
            diagnostics: false,
            estimation_probes: Vec::new(),
            order: None,
            inits: None,
            step_delays: Vec::new(),
            round_timeout: Duration::from_secs(30),
        }
    }
}

impl RunOptions {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint interval must be at least 1"));
        }
        Ok(())
    }
}
