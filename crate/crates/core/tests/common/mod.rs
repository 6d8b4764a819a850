#![allow(dead_code)]

use nalgebra::{Matrix2, Vector2};
use rand::Rng;
use wasgd::data::{synth_blobs, DatasetHandle};
use wasgd::models::SoftmaxRegression;
use wasgd::protocol::CommConfig;
use wasgd::rng::SplitMix64;
use wasgd::variance::VarianceSpec;
use wasgd::weighting::WeightVector;

/// Steady state of the second-moment recursion, solved as a 2×2 linear
/// system in (Q, P). Q: combined parameter, P: single worker.
///
/// Q = (1−ζ)[A Q + k ω P + h ω] + ζ Q
/// P = (1−ζ)[(A + k) P + h]    + ζ Q
///
/// with A = (1−ηc)², k = η²σ_b², h = η²σ_h². Needs ζ < 1.
pub fn stationary_by_linear_solve(s: &VarianceSpec) -> f64 {
    assert!(s.zeta < 1.0);
    let a = (1.0 - s.eta * s.c).powi(2);
    let k = s.eta * s.eta * s.sigma_b * s.sigma_b;
    let h = s.eta * s.eta * s.sigma_h * s.sigma_h;
    let w: f64 = s.theta.as_slice().iter().map(|t| t * t).sum();
    let z = s.zeta;
    let m = Matrix2::new(
        1.0 - (1.0 - z) * a - z,
        -(1.0 - z) * k * w,
        -z,
        1.0 - (1.0 - z) * (a + k),
    );
    let rhs = Vector2::new((1.0 - z) * h * w, (1.0 - z) * h);
    let sol = m.lu().solve(&rhs).expect("singular steady-state system");
    sol[0]
}

/// A point of the simplex: normalized exponentials, with occasional exact
/// zeros so that faces and vertices are visited.
pub fn random_simplex(rng: &mut SplitMix64, p: usize) -> WeightVector {
    loop {
        let mut v: Vec<f64> = (0..p)
            .map(|_| {
                if rng.random_bool(0.2) {
                    0.0
                } else {
                    -rng.random::<f64>().max(f64::MIN_POSITIVE).ln()
                }
            })
            .collect();
        let s: f64 = v.iter().sum();
        if s > 0.0 {
            v.iter_mut().for_each(|x| *x /= s);
            return WeightVector::new(v).unwrap();
        }
    }
}

/// Random admissible spec: η < 2/c and a positive denominator with margin.
pub fn random_spec(rng: &mut SplitMix64) -> VarianceSpec {
    loop {
        let c = rng.random_range(0.2..3.0);
        let eta = rng.random_range(0.01..0.95) * 2.0 / c;
        let sigma_b = rng.random_range(0.0..1.5);
        let sigma_h = rng.random_range(0.0..2.0);
        let zeta = rng.random_range(0.01..0.99);
        let p = rng.random_range(1..=16);
        let theta = random_simplex(rng, p);
        let spec = VarianceSpec::new(c, eta, sigma_b, sigma_h, zeta, theta).unwrap();
        if 2.0 * c - eta * c * c - eta * sigma_b * sigma_b > 0.05 {
            return spec;
        }
    }
}

/// Balanced 10-class Gaussian blobs, 2000 samples, 20 features.
pub fn desk_classifier() -> (DatasetHandle, SoftmaxRegression) {
    (
        synth_blobs(10, 200, 20, 1.0, 7).unwrap(),
        SoftmaxRegression::new(20, 10),
    )
}

/// Four workers, a period of 20 steps (100 exchanges per pass over the
/// 2000 samples) and η = 0.05.
pub fn desk_config() -> CommConfig {
    CommConfig {
        p: 4,
        tau: 20,
        m: 10,
        c: 2,
        eta: 0.05,
        ..Default::default()
    }
}

/// Three-class toy problem, 150 samples, 4 features.
pub fn toy_classifier() -> (DatasetHandle, SoftmaxRegression) {
    (synth_blobs(3, 50, 4, 1.0, 3).unwrap(), SoftmaxRegression::new(4, 3))
}
