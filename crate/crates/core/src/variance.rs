//! Checks of the analysis: stationary variance of weighted aggregation on a
//! noisy quadratic, equivalence with mini-batch descent, contraction between
//! coupled runs, and the effect of the weighting temperature and of β.

use serde::{Deserialize, Serialize};

use crate::data::DatasetHandle;
use crate::error::{Error, Result};
use crate::experiment::{compare_runs, Comparison, Metric};
use crate::models::{Model, NoisyQuadraticSpec, ParamVector};
use crate::par::{self, Execution};
use crate::protocol::{
    run_wasgd_plus_sync, run_weighted, Aggregation, CommConfig, OrderPolicy, RunOptions, Scheme, TrajectoryLog,
};
use crate::rng::{derive_seed, permutation, SplitMix64};
use crate::weighting::{record_index, WeightRule, WeightVector};

/// Trajectories are declared divergent past this magnitude.
const DIVERGENCE: f64 = 1e100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceSpec {
    pub c: f64,
    pub eta: f64,
    pub sigma_b: f64,
    pub sigma_h: f64,
    pub zeta: f64,
    pub p: usize,
    pub theta: WeightVector,
}

impl VarianceSpec {
    pub fn new(c: f64, eta: f64, sigma_b: f64, sigma_h: f64, zeta: f64, theta: WeightVector) -> Result<Self> {
        let spec = Self {
            c,
            eta,
            sigma_b,
            sigma_h,
            zeta,
            p: theta.len(),
            theta,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Equal weights over `p` workers.
    pub fn equal(c: f64, eta: f64, sigma_b: f64, sigma_h: f64, zeta: f64, p: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::config("p must be at least 1"));
        }
        Self::new(c, eta, sigma_b, sigma_h, zeta, WeightVector::uniform(p))
    }

    pub fn validate(&self) -> Result<()> {
        self.noise()?;
        if !(self.eta > 0.0 && self.eta < 2.0 / self.c) {
            return Err(Error::config(format!(
                "eta = {} must lie in (0, 2/c) = (0, {})",
                self.eta,
                2.0 / self.c
            )));
        }
        if !(self.zeta > 0.0 && self.zeta <= 1.0) {
            return Err(Error::config(format!("zeta = {} outside (0, 1]", self.zeta)));
        }
        if self.theta.len() != self.p || self.p == 0 {
            return Err(Error::config(format!(
                "{} weights for p = {}",
                self.theta.len(),
                self.p
            )));
        }
        Ok(())
    }

    pub fn noise(&self) -> Result<NoisyQuadraticSpec> {
        NoisyQuadraticSpec::new(self.c, self.sigma_b, self.sigma_h)
    }

    /// `ω = Σ θᵢ²`.
    pub fn omega(&self) -> f64 {
        self.theta.concentration()
    }

    /// `1 − (1 − ηc)² = η(2c − ηc²)`.
    fn rho(&self) -> f64 {
        self.eta * (2.0 * self.c - self.eta * self.c * self.c)
    }

    /// `δ = ζ / ((1 − ζ) η (2c − ηc²))`; infinite at `ζ = 1`.
    pub fn delta(&self) -> f64 {
        if self.zeta == 1.0 {
            f64::INFINITY
        } else {
            self.zeta / ((1.0 - self.zeta) * self.rho())
        }
    }
}

/// Stationary `Var(Σ θᵢ xᵢ)`:
/// `η σ_h² ω / (2c − ηc² − η σ_b² (1 + δω)/(1 + δ))`.
pub fn asymptotic_variance(spec: &VarianceSpec) -> Result<f64> {
    spec.validate()?;
    let omega = spec.omega();
    // (1 + δω)/(1 + δ) with numerator and denominator scaled by
    // (1 − ζ)η(2c − ηc²), which stays finite at ζ = 1.
    let r = spec.rho() * (1.0 - spec.zeta);
    let ratio = (r + spec.zeta * omega) / (r + spec.zeta);
    let den = 2.0 * spec.c - spec.eta * spec.c * spec.c - spec.eta * spec.sigma_b * spec.sigma_b * ratio;
    if !(den > 0.0) {
        return Err(Error::Instability(format!(
            "no stationary variance: denominator {den} is not positive"
        )));
    }
    Ok(spec.eta * spec.sigma_h * spec.sigma_h * omega / den)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloOptions {
    /// Steps per replica, burn-in included.
    pub steps: u64,
    pub replicas: usize,
    /// Leading fraction of each replica that is discarded.
    pub burn_in: f64,
    pub seed: u64,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for MonteCarloOptions {
    fn default() -> Self {
        Self {
            steps: 200_000,
            replicas: 200,
            burn_in: 0.5,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

impl MonteCarloOptions {
    fn burn_in_steps(&self) -> u64 {
        (self.steps as f64 * self.burn_in).floor() as u64
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.burn_in) {
            return Err(Error::config(format!(
                "burn-in fraction {} outside [0, 1)",
                self.burn_in
            )));
        }
        if self.replicas == 0 {
            return Err(Error::config("at least one replica is needed"));
        }
        if self.steps <= self.burn_in_steps() {
            return Err(Error::config("no steps left after burn-in"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub empirical_variance: f64,
    pub closed_form: f64,
    pub replicas: usize,
    /// Post-burn-in steps per replica.
    pub steps: u64,
    pub relative_error: f64,
}

/// `p` coupled scalar chains. One call is one step of every worker followed,
/// if `communicate`, by every worker adopting `Σ θⱼ xⱼ`. Returns `Σ θⱼ xⱼ`.
struct Chains<'a> {
    x: Vec<f64>,
    theta: &'a [f64],
    c: f64,
    eta: f64,
}

impl Chains<'_> {
    fn combined(&self) -> f64 {
        let mut s = self.theta[0] * self.x[0];
        for (t, x) in self.theta.iter().zip(&self.x).skip(1) {
            s += t * x;
        }
        s
    }

    fn step(&mut self, mut noise: impl FnMut(usize) -> (f64, f64), communicate: bool) -> f64 {
        for (i, x) in self.x.iter_mut().enumerate() {
            let (b, h) = noise(i);
            let g = (self.c - b) * *x - h;
            *x -= self.eta * g;
        }
        let s = self.combined();
        if communicate {
            self.x.iter_mut().for_each(|x| *x = s);
        }
        s
    }
}

/// Monte-Carlo estimate of the stationary variance: independent replicas of
/// `p` chains started at zero, a Bernoulli(ζ) exchange after every step,
/// and the pooled variance of `Σ θᵢ xᵢ` over all post-burn-in steps.
pub fn simulate_variance(spec: &VarianceSpec, opts: &MonteCarloOptions) -> Result<MonteCarloReport> {
    spec.validate()?;
    opts.validate()?;
    let noise = spec.noise()?;
    let burn = opts.burn_in_steps();
    let replicas = par::map_range(opts.execution, opts.replicas, |r| -> Result<(f64, f64)> {
        let mut rng = SplitMix64::new(derive_seed(opts.seed, r as u64));
        let mut chains = Chains {
            x: vec![0.0; spec.p],
            theta: spec.theta.as_slice(),
            c: spec.c,
            eta: spec.eta,
        };
        let (mut sum, mut sq) = (0.0, 0.0);
        for t in 0..opts.steps {
            let exchange = rng.bernoulli(spec.zeta);
            let s = chains.step(|_| noise.draw_noise(&mut rng), exchange);
            if !(s.abs() < DIVERGENCE) {
                return Err(Error::Instability(format!(
                    "replica {r} diverged at step {t} (value {s})"
                )));
            }
            if t >= burn {
                sum += s;
                sq += s * s;
            }
        }
        Ok((sum, sq))
    });
    let (mut sum, mut sq) = (0.0, 0.0);
    for rep in replicas {
        let (a, b) = rep?;
        sum += a;
        sq += b;
    }
    let kept = opts.steps - burn;
    let n = (kept * opts.replicas as u64) as f64;
    let mean = sum / n;
    let empirical_variance = (sq / n - mean * mean).max(0.0);
    let closed_form = asymptotic_variance(spec)?;
    let relative_error = if closed_form == 0.0 {
        if empirical_variance == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (empirical_variance - closed_form).abs() / closed_form
    };
    Ok(MonteCarloReport {
        empirical_variance,
        closed_form,
        replicas: opts.replicas,
        steps: kept,
        relative_error,
    })
}

/// One fixed order per worker, drawn from `seed`.
pub fn worker_orders(p: usize, len: usize, seed: u64) -> Vec<Vec<usize>> {
    (0..p).map(|i| permutation(derive_seed(seed, i as u64), len)).collect()
}

/// Runs the protocol engine with fixed weights `theta`, full acceptance and
/// an exchange after every step, and compares the combined parameters after
/// each step with plain mini-batch descent whose batch is the `p` samples
/// the workers visited in that step. Returns the largest deviation.
pub fn aggregation_deviation(
    model: &dyn Model,
    data: &DatasetHandle,
    theta: &WeightVector,
    eta: f64,
    steps: usize,
    seed: u64,
) -> Result<f64> {
    let p = theta.len();
    let len = data.train().len();
    if len == 0 || steps == 0 {
        return Err(Error::config("need at least one sample and one step"));
    }
    let orders = worker_orders(p, len, seed);
    let cfg = CommConfig {
        p,
        tau: 1,
        m: 1,
        c: 1,
        n: 1,
        beta: 1.0,
        eta,
        zeta: Some(1.0),
        seed,
        ..Default::default()
    };
    let scheme = Scheme {
        name: "wasgd+".into(),
        aggregation: Aggregation::Weighted(WeightRule::Fixed(theta.clone())),
        beta: 1.0,
        schedule: record_index(1, 1, 1)?,
        order: OrderPolicy::Explicit(orders.clone()),
    };
    let opts = RunOptions {
        epochs: steps.div_ceil(len),
        checkpoint_every: u64::MAX,
        diagnostics: true,
        ..Default::default()
    };
    let log = run_weighted(model, data, &cfg, &scheme, &opts)?;

    let mut x = model.init_params(seed);
    let mut sum = vec![0.0; x.dim()];
    let mut g = vec![0.0; x.dim()];
    let mut worst: f64 = 0.0;
    for (t, round) in log.rounds.iter().take(steps).enumerate() {
        sum.iter_mut().for_each(|v| *v = 0.0);
        for order in &orders {
            model.loss_grad_into(&x, &data.train()[order[t % len]], &mut g);
            sum.iter_mut().zip(&g).for_each(|(s, g)| *s += g);
        }
        for (x, s) in x.iter_mut().zip(&sum) {
            *x -= eta * s / p as f64;
        }
        worst = worst.max(round.consensus.max_abs_diff(&x));
    }
    if log.rounds.len() < steps {
        return Err(Error::config(format!(
            "engine stopped after {} of {steps} steps",
            log.rounds.len()
        )));
    }
    Ok(worst)
}

/// Equal weights and an exchange after every step make the protocol plain
/// mini-batch descent with batch size `p`; returns the largest deviation
/// from it over `steps` steps.
pub fn minibatch_equivalence(
    model: &dyn Model,
    data: &DatasetHandle,
    p: usize,
    eta: f64,
    steps: usize,
    seed: u64,
) -> Result<f64> {
    if p == 0 {
        return Err(Error::config("p must be at least 1"));
    }
    aggregation_deviation(model, data, &WeightVector::uniform(p), eta, steps, seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContractionReport {
    /// Distance between the two runs' combined parameters after each round.
    pub distances: Vec<f64>,
    /// Ratios of consecutive distances.
    pub ratios: Vec<f64>,
    /// `exp` of the slope of a least-squares line through `ln d_k`; `None`
    /// when some distance is zero.
    pub fitted_ratio: Option<f64>,
    pub r_squared: Option<f64>,
}

/// Two executions that differ only in their initial parameters: same seed,
/// so the same sample orders and noise. Needs `β = 1`.
pub fn contraction_rate(
    model: &dyn Model,
    data: &DatasetHandle,
    cfg: &CommConfig,
    inits_a: Vec<ParamVector>,
    inits_b: Vec<ParamVector>,
    opts: &RunOptions,
) -> Result<ContractionReport> {
    if cfg.beta != 1.0 {
        return Err(Error::config(format!("contraction needs beta = 1, got {}", cfg.beta)));
    }
    let run = |inits: Vec<ParamVector>| {
        let o = RunOptions {
            inits: Some(inits),
            diagnostics: true,
            ..opts.clone()
        };
        run_wasgd_plus_sync(model, data, cfg, &o)
    };
    let a = run(inits_a)?;
    let b = run(inits_b)?;
    let distances: Vec<f64> = a
        .rounds
        .iter()
        .zip(&b.rounds)
        .map(|(ra, rb)| ra.consensus.distance(&rb.consensus))
        .collect();
    let ratios = distances.windows(2).map(|w| w[1] / w[0]).collect();
    let (fitted_ratio, r_squared) = match log_linear_fit(&distances) {
        Some((slope, r2)) => (Some(slope.exp()), Some(r2)),
        None => (None, None),
    };
    Ok(ContractionReport {
        distances,
        ratios,
        fitted_ratio,
        r_squared,
    })
}

/// Slope and R² of `ln d_k` against `k`.
fn log_linear_fit(d: &[f64]) -> Option<(f64, f64)> {
    if d.len() < 2 || d.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return None;
    }
    let n = d.len() as f64;
    let ys: Vec<f64> = d.iter().map(|v| v.ln()).collect();
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (k, y) in ys.iter().enumerate() {
        let dx = k as f64 - mx;
        let dy = y - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some((slope, r2))
}

/// What a tendency sweep varies, and against which baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TendencyAxis {
    /// Temperatures `T = 1/ã`, compared with equal weights.
    Temperature,
    /// Acceptance factors, compared with `β = 1`.
    Acceptance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TendencyRow {
    pub value: f64,
    pub comparison: Comparison,
    pub logs: Vec<TrajectoryLog>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TendencySweep {
    pub baseline: Vec<TrajectoryLog>,
    pub rows: Vec<TendencyRow>,
}

/// Replica `r` runs with seed `cfg.seed + r` for the baseline and for
/// every swept value, so each comparison pairs runs on the same streams.
#[allow(clippy::too_many_arguments)]
pub fn weighting_tendency_sweep(
    model: &dyn Model,
    data: &DatasetHandle,
    cfg: &CommConfig,
    axis: TendencyAxis,
    values: &[f64],
    replicas: usize,
    metric: Metric,
    opts: &RunOptions,
) -> Result<TendencySweep> {
    if replicas == 0 {
        return Err(Error::config("at least one replica is needed"));
    }
    let seeded = |r: usize| CommConfig {
        seed: cfg.seed.wrapping_add(r as u64),
        ..cfg.clone()
    };
    let baseline_scheme = |c: &CommConfig| -> Result<Scheme> {
        let mut s = Scheme::wasgd_plus(c)?;
        match axis {
            TendencyAxis::Temperature => s.aggregation = Aggregation::Weighted(WeightRule::Equal),
            TendencyAxis::Acceptance => s.beta = 1.0,
        }
        Ok(s)
    };
    let candidate = |c: &CommConfig, v: f64| -> Result<(CommConfig, Scheme)> {
        let mut c = c.clone();
        match axis {
            TendencyAxis::Temperature => {
                if !(v > 0.0) {
                    return Err(Error::config(format!("temperature {v} must be positive")));
                }
                c.a_tilde = 1.0 / v;
            }
            TendencyAxis::Acceptance => c.beta = v,
        }
        let s = Scheme::wasgd_plus(&c)?;
        Ok((c, s))
    };

    // Job k < replicas is the baseline of replica k; the rest are
    // (value, replica) pairs in value-major order.
    let jobs = replicas * (values.len() + 1);
    let logs = par::map_range(opts.execution, jobs, |k| -> Result<TrajectoryLog> {
        let r = k % replicas;
        let c = seeded(r);
        if k < replicas {
            run_weighted(model, data, &c, &baseline_scheme(&c)?, opts)
        } else {
            let (c, s) = candidate(&c, values[k / replicas - 1])?;
            run_weighted(model, data, &c, &s, opts)
        }
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut chunks = logs.chunks(replicas);
    let baseline = chunks.next().unwrap_or_default().to_vec();
    let rows = values
        .iter()
        .zip(chunks)
        .map(|(&value, runs)| {
            Ok(TendencyRow {
                value,
                comparison: compare_runs(&baseline, runs, metric)?,
                logs: runs.to_vec(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(TendencySweep { baseline, rows })
}
