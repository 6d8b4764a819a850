//! Single-worker reference SGD.

use crate::models::{Model, ParamVector, Sample};
use crate::rng::{permutation, SplitMix64};

/// Result of [`sequential_sgd`].
#[derive(Debug, Clone, PartialEq)]
pub struct SequentialRun {
    pub params: ParamVector,
    /// Parameters after every `every`-th step.
    pub snapshots: Vec<(u64, ParamVector)>,
}

/// Plain SGD over `train`, split into `chunks` equal chunks that are each
/// visited in a fresh order per pass. The order of each pass is
/// `permutation(s, len)` for the next draw `s` of a SplitMix64 stream seeded
/// with `order_seed`.
#[allow(clippy::too_many_arguments)]
pub fn sequential_sgd(
    model: &dyn Model,
    train: &[Sample],
    x0: ParamVector,
    eta: f64,
    epochs: usize,
    chunks: usize,
    order_seed: u64,
    every: u64,
) -> SequentialRun {
    assert!(
        chunks >= 1 && train.len().is_multiple_of(chunks),
        "chunks must divide the data"
    );
    let len = train.len() / chunks;
    let mut rng = SplitMix64::new(order_seed);
    let mut x = x0;
    let mut g = vec![0.0; x.dim()];
    let mut snapshots = Vec::new();
    let mut step = 0u64;
    for _ in 0..epochs {
        for l in 0..chunks {
            for k in permutation(rng.next_u64(), len) {
                model.loss_grad_into(&x, &train[l * len + k], &mut g);
                for (xi, gi) in x.iter_mut().zip(&g) {
                    *xi -= eta * gi;
                }
                step += 1;
                if every > 0 && step.is_multiple_of(every) {
                    snapshots.push((step, x.clone()));
                }
            }
        }
    }
    SequentialRun { params: x, snapshots }
}
