//! Loss energies, worker weights, and the recording schedule used to
//! estimate them from losses that fall out of ordinary SGD steps.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Model, ParamVector, Sample};
use crate::par::{self, Execution};

/// Normalized worker weights: entries in `[0, 1]` summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    /// Validates a user-supplied weight vector.
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if theta.is_empty() {
            return Err(Error::config("weight vector must not be empty"));
        }
        if theta.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::config("weights must lie in [0, 1]"));
        }
        let sum: f64 = theta.iter().sum();
        if (sum - 1.0).abs() > 1e-10 {
            return Err(Error::config(format!("weights sum to {sum}, not 1")));
        }
        Ok(Self(theta))
    }

    pub fn uniform(p: usize) -> Self {
        assert!(p >= 1);
        Self(vec![1.0 / p as f64; p])
    }

    /// Divides positive scores by their sum.
    fn from_unnormalized(mut scores: Vec<f64>) -> Self {
        let total: f64 = scores.iter().sum();
        for s in &mut scores {
            *s /= total;
        }
        Self(scores)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// ω = Σ θᵢ², which ranges over `[1/p, 1]`.
    pub fn concentration(&self) -> f64 {
        self.0.iter().map(|t| t * t).sum()
    }
}

/// Accumulated recorded loss of one worker within a communication period.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossEnergy {
    pub raw: f64,
    pub count: usize,
}

impl LossEnergy {
    pub fn record(&mut self, loss: f64) {
        self.raw += loss;
        self.count += 1;
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

/// `h'ᵢ = hᵢ / Σ h`.
pub fn normalize_energies(h: &[f64]) -> Result<Vec<f64>> {
    if h.is_empty() {
        return Err(Error::config("no energies to normalize"));
    }
    if let Some(bad) = h.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::DegenerateEnergy(format!(
            "energies must be finite and non-negative, got {bad}"
        )));
    }
    let total: f64 = h.iter().sum();
    if total == 0.0 {
        return Err(Error::DegenerateEnergy("all energies are zero".into()));
    }
    Ok(h.iter().map(|v| v / total).collect())
}

/// Boltzmann weights `θᵢ ∝ exp(−ã h'ᵢ)`, computed relative to the minimum
/// energy so large `ã` cannot overflow.
pub fn boltzmann_weights(h_norm: &[f64], a_tilde: f64) -> WeightVector {
    assert!(!h_norm.is_empty());
    let min = h_norm.iter().copied().fold(f64::INFINITY, f64::min);
    let max = h_norm.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // For ã < 0 the largest energy wins; shift by the max instead.
    let pivot = if a_tilde >= 0.0 { min } else { max };
    let scores = h_norm
        .iter()
        .map(|h| {
            let e = -a_tilde * (h - pivot);
            if e.is_nan() {
                1.0
            } else {
                e.exp()
            }
        })
        .collect();
    WeightVector::from_unnormalized(scores)
}

/// Legacy weights `θᵢ ∝ 1 / hᵢ`.
pub fn inverse_loss_weights(h: &[f64]) -> Result<WeightVector> {
    if h.is_empty() {
        return Err(Error::config("no energies"));
    }
    if let Some(bad) = h.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::DegenerateEnergy(format!(
            "inverse-loss weighting needs positive energies, got {bad}"
        )));
    }
    Ok(WeightVector::from_unnormalized(h.iter().map(|v| 1.0 / v).collect()))
}

/// Σ |θᵢ − θᵢ_true|, in `[0, 2]` for simplex inputs.
pub fn estimation_error(theta: &WeightVector, theta_true: &WeightVector) -> Result<f64> {
    if theta.len() != theta_true.len() {
        return Err(Error::config(format!(
            "weight vectors differ in length: {} vs {}",
            theta.len(),
            theta_true.len()
        )));
    }
    Ok(theta
        .as_slice()
        .iter()
        .zip(theta_true.as_slice())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        // Rounding in the two normalizations can push disjoint supports a
        // few ulps past 2.
        .min(2.0))
}

/// Total loss of every worker over the whole dataset.
pub fn full_losses(model: &dyn Model, x_all: &[ParamVector], dataset: &[Sample], exec: Execution) -> Vec<f64> {
    par::map(exec, x_all, |x| {
        par::block_sum(Execution::Sequential, dataset, |s| model.loss_unchecked(x, s))
    })
}

/// Boltzmann weights from full-dataset losses. Measurement only; the live
/// protocol never calls this.
pub fn true_weights(
    model: &dyn Model,
    x_all: &[ParamVector],
    dataset: &[Sample],
    a_tilde: f64,
) -> Result<WeightVector> {
    if dataset.is_empty() {
        return Err(Error::config("dataset must not be empty"));
    }
    if x_all.is_empty() {
        return Err(Error::config("no worker parameters"));
    }
    for x in x_all {
        model.check(x, &dataset[0])?;
    }
    let totals = full_losses(model, x_all, dataset, Execution::Parallel);
    WeightRule::Boltzmann { a_tilde }.weights(&totals)
}

/// Step indices within one communication period whose losses are recorded:
/// the last `m / c` steps of each of `c` equal sub-segments of `[0, τ)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordSchedule {
    tau: usize,
    indices: BTreeSet<usize>,
}

impl RecordSchedule {
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn period(&self) -> usize {
        self.tau
    }

    /// Membership of a chunk-local step index, taken modulo the period.
    #[inline]
    pub fn contains(&self, step: usize) -> bool {
        self.indices.contains(&(step % self.tau))
    }

    /// Records every step.
    pub fn every_step(tau: usize) -> Self {
        Self {
            tau,
            indices: (0..tau).collect(),
        }
    }
}

pub fn record_index(m: usize, c: usize, tau: usize) -> Result<RecordSchedule> {
    if tau == 0 || c == 0 || m == 0 {
        return Err(Error::config("m, c and tau must be positive"));
    }
    if !m.is_multiple_of(c) || !tau.is_multiple_of(c) {
        return Err(Error::config(format!(
            "c = {c} must divide both m = {m} and tau = {tau}"
        )));
    }
    if m > tau {
        return Err(Error::config(format!("m = {m} exceeds tau = {tau}")));
    }
    let segment = tau / c;
    let per_segment = m / c;
    let indices = (0..c)
        .flat_map(|i| (0..per_segment).map(move |j| (i + 1) * segment - j - 1))
        .collect();
    Ok(RecordSchedule { tau, indices })
}

/// How a communication round turns energies into weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightRule {
    Boltzmann { a_tilde: f64 },
    InverseLoss,
    Fixed(WeightVector),
    Equal,
}

impl WeightRule {
    /// Weights for the given raw energies. Degenerate energies fall back to
    /// the limit of the rule: equal weights when every energy is zero, and
    /// for inverse-loss an equal split among the zero-energy workers.
    pub fn weights(&self, energies: &[f64]) -> Result<WeightVector> {
        let p = energies.len();
        match self {
            WeightRule::Equal => Ok(WeightVector::uniform(p)),
            WeightRule::Fixed(theta) => {
                if theta.len() != p {
                    return Err(Error::config(format!(
                        "fixed weights have {} entries for {p} workers",
                        theta.len()
                    )));
                }
                Ok(theta.clone())
            }
            WeightRule::Boltzmann { a_tilde } => match normalize_energies(energies) {
                Ok(h_norm) => Ok(boltzmann_weights(&h_norm, *a_tilde)),
                Err(Error::DegenerateEnergy(_)) if energies.iter().all(|h| *h == 0.0) => Ok(WeightVector::uniform(p)),
                Err(e) => Err(e),
            },
            WeightRule::InverseLoss => {
                if energies.contains(&0.0) && energies.iter().all(|h| *h >= 0.0) {
                    let zeros = energies.iter().filter(|h| **h == 0.0).count() as f64;
                    return Ok(WeightVector(
                        energies
                            .iter()
                            .map(|h| if *h == 0.0 { 1.0 / zeros } else { 0.0 })
                            .collect(),
                    ));
                }
                inverse_loss_weights(energies)
            }
        }
    }
}
