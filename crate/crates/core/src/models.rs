//! Differentiable objectives with per-sample loss and gradient.
//!
//! Every model exposes the loss as a byproduct of the gradient computation
//! ([`Model::loss_grad_into`]), which is how the engine records loss energy
//! without extra forward passes.

use std::ops::{Deref, DerefMut};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Dense model parameters of one worker.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// `self -= step * direction`
    pub fn sub_scaled(&mut self, step: f64, direction: &[f64]) {
        debug_assert_eq!(self.0.len(), direction.len());
        for (x, d) in self.0.iter_mut().zip(direction) {
            *x -= step * d;
        }
    }

    /// Euclidean distance to `other`.
    pub fn distance(&self, other: &ParamVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Largest absolute coordinate difference to `other`.
    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    Value(f64),
}

/// One training example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: Label,
}

impl Sample {
    pub fn class(features: Vec<f64>, class: usize) -> Self {
        Self {
            features,
            label: Label::Class(class),
        }
    }

    pub fn value(features: Vec<f64>, target: f64) -> Self {
        Self {
            features,
            label: Label::Value(target),
        }
    }

    pub fn class_id(&self) -> Option<usize> {
        match self.label {
            Label::Class(c) => Some(c),
            Label::Value(_) => None,
        }
    }

    pub fn target(&self) -> Option<f64> {
        match self.label {
            Label::Value(v) => Some(v),
            Label::Class(_) => None,
        }
    }
}

/// Loss and gradient from one backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: ParamVector,
}

pub trait Model: Send + Sync {
    fn name(&self) -> &'static str;

    /// Parameter dimension.
    fn dim(&self) -> usize;

    /// Required feature length of a sample.
    fn input_dim(&self) -> usize;

    /// Deterministic initial parameters shared by all workers of a run.
    fn init_params(&self, seed: u64) -> ParamVector;

    /// Validates the sample's label kind and range.
    fn check_label(&self, label: &Label) -> Result<()>;

    /// Writes the gradient into `grad` and returns the loss at `x`.
    /// Dimensions must already be validated.
    fn loss_grad_into(&self, x: &[f64], s: &Sample, grad: &mut [f64]) -> f64;

    /// Loss at `x`. Dimensions must already be validated.
    fn loss_unchecked(&self, x: &[f64], s: &Sample) -> f64;

    /// 0/1 misclassification for classifiers; `None` for regression models.
    fn error_unchecked(&self, _x: &[f64], _s: &Sample) -> Option<f64> {
        None
    }

    fn check(&self, x: &[f64], s: &Sample) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        self.check_sample(s)
    }

    fn check_sample(&self, s: &Sample) -> Result<()> {
        if s.features.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: s.features.len(),
            });
        }
        self.check_label(&s.label)
    }

    fn loss(&self, x: &[f64], s: &Sample) -> Result<f64> {
        self.check(x, s)?;
        Ok(self.loss_unchecked(x, s))
    }

    fn grad(&self, x: &[f64], s: &Sample) -> Result<LossGrad> {
        self.check(x, s)?;
        let mut grad = ParamVector::zeros(self.dim());
        let loss = self.loss_grad_into(x, s, &mut grad);
        Ok(LossGrad { loss, grad })
    }
}

fn class_label(label: &Label, classes: usize) -> Result<usize> {
    match *label {
        Label::Class(c) if c < classes => Ok(c),
        Label::Class(c) => Err(Error::config(format!("class label {c} outside [0, {classes})"))),
        Label::Value(_) => Err(Error::config("classifier needs a class label")),
    }
}

fn value_label(label: &Label) -> Result<f64> {
    match *label {
        Label::Value(v) => Ok(v),
        Label::Class(_) => Err(Error::config("regression model needs a real target")),
    }
}

fn target_of(s: &Sample) -> f64 {
    match s.label {
        Label::Value(v) => v,
        Label::Class(c) => c as f64,
    }
}

fn class_of(s: &Sample) -> usize {
    match s.label {
        Label::Class(c) => c,
        Label::Value(v) => v as usize,
    }
}

/// Turns logits into probabilities in place.
fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in z.iter_mut() {
        *v /= total;
    }
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

/// Multinomial logistic regression. Parameters: row-major weights
/// `classes × features` followed by `classes` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxRegression {
    pub features: usize,
    pub classes: usize,
}

impl SoftmaxRegression {
    pub fn new(features: usize, classes: usize) -> Self {
        assert!(classes >= 2, "softmax needs at least two classes");
        Self { features, classes }
    }

    fn logits(&self, x: &[f64], s: &Sample) -> Vec<f64> {
        let (w, b) = x.split_at(self.classes * self.features);
        (0..self.classes)
            .map(|c| {
                let row = &w[c * self.features..(c + 1) * self.features];
                b[c] + row.iter().zip(&s.features).map(|(a, f)| a * f).sum::<f64>()
            })
            .collect()
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl Model for SoftmaxRegression {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn dim(&self) -> usize {
        self.classes * (self.features + 1)
    }

    fn input_dim(&self) -> usize {
        self.features
    }

    fn init_params(&self, _seed: u64) -> ParamVector {
        ParamVector::zeros(self.dim())
    }

    fn check_label(&self, label: &Label) -> Result<()> {
        class_label(label, self.classes).map(|_| ())
    }

    fn loss_grad_into(&self, x: &[f64], s: &Sample, grad: &mut [f64]) -> f64 {
        let y = class_of(s);
        let mut z = self.logits(x, s);
        let loss = log_sum_exp(&z) - z[y];
        softmax_in_place(&mut z);
        let (gw, gb) = grad.split_at_mut(self.classes * self.features);
        for c in 0..self.classes {
            let d = z[c] - if c == y { 1.0 } else { 0.0 };
            gb[c] = d;
            let row = &mut gw[c * self.features..(c + 1) * self.features];
            for (g, f) in row.iter_mut().zip(&s.features) {
                *g = d * f;
            }
        }
        loss
    }

    fn loss_unchecked(&self, x: &[f64], s: &Sample) -> f64 {
        let z = self.logits(x, s);
        log_sum_exp(&z) - z[class_of(s)]
    }

    fn error_unchecked(&self, x: &[f64], s: &Sample) -> Option<f64> {
        let z = self.logits(x, s);
        Some(if argmax(&z) == class_of(s) { 0.0 } else { 1.0 })
    }
}

/// One-hidden-layer tanh network with softmax output. Parameter layout:
/// `W1 (hidden × features)`, `b1 (hidden)`, `W2 (classes × hidden)`, `b2 (classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub features: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl Mlp {
    pub fn new(features: usize, hidden: usize, classes: usize) -> Self {
        assert!(classes >= 2 && hidden >= 1);
        Self {
            features,
            hidden,
            classes,
        }
    }

    fn split<'a>(&self, x: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64], &'a [f64]) {
        let (w1, rest) = x.split_at(self.hidden * self.features);
        let (b1, rest) = rest.split_at(self.hidden);
        let (w2, b2) = rest.split_at(self.classes * self.hidden);
        (w1, b1, w2, b2)
    }

    fn forward(&self, x: &[f64], s: &Sample) -> (Vec<f64>, Vec<f64>) {
        let (w1, b1, w2, b2) = self.split(x);
        let h: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let row = &w1[j * self.features..(j + 1) * self.features];
                (b1[j] + row.iter().zip(&s.features).map(|(a, f)| a * f).sum::<f64>()).tanh()
            })
            .collect();
        let z: Vec<f64> = (0..self.classes)
            .map(|c| {
                let row = &w2[c * self.hidden..(c + 1) * self.hidden];
                b2[c] + row.iter().zip(&h).map(|(a, v)| a * v).sum::<f64>()
            })
            .collect();
        (h, z)
    }
}

impl Model for Mlp {
    fn name(&self) -> &'static str {
        "mlp"
    }

    fn dim(&self) -> usize {
        self.hidden * (self.features + 1) + self.classes * (self.hidden + 1)
    }

    fn input_dim(&self) -> usize {
        self.features
    }

    fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = SplitMix64::new(seed);
        let mut x = ParamVector::zeros(self.dim());
        let scale1 = (1.0 / self.features.max(1) as f64).sqrt();
        let scale2 = (1.0 / self.hidden as f64).sqrt();
        let w1_len = self.hidden * self.features;
        let w2_start = w1_len + self.hidden;
        let w2_len = self.classes * self.hidden;
        for v in &mut x[..w1_len] {
            let n: f64 = rng.sample(StandardNormal);
            *v = n * scale1;
        }
        for v in &mut x[w2_start..w2_start + w2_len] {
            let n: f64 = rng.sample(StandardNormal);
            *v = n * scale2;
        }
        x
    }

    fn check_label(&self, label: &Label) -> Result<()> {
        class_label(label, self.classes).map(|_| ())
    }

    fn loss_grad_into(&self, x: &[f64], s: &Sample, grad: &mut [f64]) -> f64 {
        let y = class_of(s);
        let (h, mut z) = self.forward(x, s);
        let loss = log_sum_exp(&z) - z[y];
        softmax_in_place(&mut z);
        let (_, _, w2, _) = self.split(x);
        let (gw1, rest) = grad.split_at_mut(self.hidden * self.features);
        let (gb1, rest) = rest.split_at_mut(self.hidden);
        let (gw2, gb2) = rest.split_at_mut(self.classes * self.hidden);
        let mut dh = vec![0.0; self.hidden];
        for c in 0..self.classes {
            let d = z[c] - if c == y { 1.0 } else { 0.0 };
            gb2[c] = d;
            for j in 0..self.hidden {
                gw2[c * self.hidden + j] = d * h[j];
                dh[j] += d * w2[c * self.hidden + j];
            }
        }
        for j in 0..self.hidden {
            let da = dh[j] * (1.0 - h[j] * h[j]);
            gb1[j] = da;
            let row = &mut gw1[j * self.features..(j + 1) * self.features];
            for (g, f) in row.iter_mut().zip(&s.features) {
                *g = da * f;
            }
        }
        loss
    }

    fn loss_unchecked(&self, x: &[f64], s: &Sample) -> f64 {
        let (_, z) = self.forward(x, s);
        log_sum_exp(&z) - z[class_of(s)]
    }

    fn error_unchecked(&self, x: &[f64], s: &Sample) -> Option<f64> {
        let (_, z) = self.forward(x, s);
        Some(if argmax(&z) == class_of(s) { 0.0 } else { 1.0 })
    }
}

/// Fits a constant `y = d` with per-sample loss `(d − a)² / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ConstantFit {
    pub init: f64,
}

impl Model for ConstantFit {
    fn name(&self) -> &'static str {
        "constant-fit"
    }

    fn dim(&self) -> usize {
        1
    }

    fn input_dim(&self) -> usize {
        0
    }

    fn init_params(&self, _seed: u64) -> ParamVector {
        ParamVector::new(vec![self.init])
    }

    fn check_label(&self, label: &Label) -> Result<()> {
        value_label(label).map(|_| ())
    }

    fn loss_grad_into(&self, x: &[f64], s: &Sample, grad: &mut [f64]) -> f64 {
        let r = x[0] - target_of(s);
        grad[0] = r;
        0.5 * r * r
    }

    fn loss_unchecked(&self, x: &[f64], s: &Sample) -> f64 {
        let r = x[0] - target_of(s);
        0.5 * r * r
    }
}

/// Linear least squares `(w·f + b − y)² / 2`. Parameters: `w` then `b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeastSquares {
    pub features: usize,
}

impl LeastSquares {
    fn residual(&self, x: &[f64], s: &Sample) -> f64 {
        let (w, b) = x.split_at(self.features);
        w.iter().zip(&s.features).map(|(a, f)| a * f).sum::<f64>() + b[0] - target_of(s)
    }
}

impl Model for LeastSquares {
    fn name(&self) -> &'static str {
        "least-squares"
    }

    fn dim(&self) -> usize {
        self.features + 1
    }

    fn input_dim(&self) -> usize {
        self.features
    }

    fn init_params(&self, _seed: u64) -> ParamVector {
        ParamVector::zeros(self.dim())
    }

    fn check_label(&self, label: &Label) -> Result<()> {
        value_label(label).map(|_| ())
    }

    fn loss_grad_into(&self, x: &[f64], s: &Sample, grad: &mut [f64]) -> f64 {
        let r = self.residual(x, s);
        let (gw, gb) = grad.split_at_mut(self.features);
        for (g, f) in gw.iter_mut().zip(&s.features) {
            *g = r * f;
        }
        gb[0] = r;
        0.5 * r * r
    }

    fn loss_unchecked(&self, x: &[f64], s: &Sample) -> f64 {
        let r = self.residual(x, s);
        0.5 * r * r
    }
}

/// Noise law of the quadratic `F(x) = c x² / 2` with stochastic gradients
/// `g(x) = c x − b̃ x − h̃`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisyQuadraticSpec {
    pub c: f64,
    pub sigma_b: f64,
    pub sigma_h: f64,
}

impl NoisyQuadraticSpec {
    pub fn new(c: f64, sigma_b: f64, sigma_h: f64) -> Result<Self> {
        let spec = Self { c, sigma_b, sigma_h };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::config(format!("curvature must be > 0, got {}", self.c)));
        }
        if !(self.sigma_b >= 0.0 && self.sigma_h >= 0.0) {
            return Err(Error::config("noise standard deviations must be >= 0"));
        }
        Ok(())
    }

    /// One independent draw of `(b̃, h̃)`, Gaussian with mean zero.
    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let zb: f64 = rng.sample(StandardNormal);
        let zh: f64 = rng.sample(StandardNormal);
        (self.sigma_b * zb, self.sigma_h * zh)
    }

    /// A stream of pre-drawn noise samples, usable as a dataset for
    /// [`NoisyQuadratic`] runs through the protocol engine.
    pub fn noise_samples(&self, count: usize, seed: u64) -> Vec<Sample> {
        let mut rng = SplitMix64::new(seed);
        (0..count)
            .map(|_| {
                let (b, h) = self.draw_noise(&mut rng);
                Sample::value(vec![b, h], 0.0)
            })
            .collect()
    }
}

/// `c·x − b̃·x − h̃` with fresh independent `b̃ ~ N(0, σ_b²)`, `h̃ ~ N(0, σ_h²)`.
pub fn sample_noisy_gradient<R: Rng + ?Sized>(spec: &NoisyQuadraticSpec, x: f64, rng: &mut R) -> f64 {
    let (b, h) = spec.draw_noise(rng);
    spec.c * x - b * x - h
}

/// The noisy quadratic as a per-sample model. Each sample carries one noise
/// draw `[b̃, h̃]` in its features; the loss is the per-sample potential
/// `Σ_k ((c − b̃) x_k² / 2 − h̃ x_k)`, whose gradient is the stochastic gradient
/// `c x − b̃ x − h̃` applied coordinate-wise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisyQuadratic {
    pub c: f64,
    pub dim: usize,
    pub init: f64,
}

impl Model for NoisyQuadratic {
    fn name(&self) -> &'static str {
        "quadratic"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn input_dim(&self) -> usize {
        2
    }

    fn init_params(&self, _seed: u64) -> ParamVector {
        ParamVector::new(vec![self.init; self.dim])
    }

    fn check_label(&self, _label: &Label) -> Result<()> {
        Ok(())
    }

    fn loss_grad_into(&self, x: &[f64], s: &Sample, grad: &mut [f64]) -> f64 {
        let (b, h) = (s.features[0], s.features[1]);
        let mut loss = 0.0;
        for (g, xk) in grad.iter_mut().zip(x) {
            *g = (self.c - b) * xk - h;
            loss += 0.5 * (self.c - b) * xk * xk - h * xk;
        }
        loss
    }

    fn loss_unchecked(&self, x: &[f64], s: &Sample) -> f64 {
        let (b, h) = (s.features[0], s.features[1]);
        x.iter().map(|xk| 0.5 * (self.c - b) * xk * xk - h * xk).sum()
    }
}
