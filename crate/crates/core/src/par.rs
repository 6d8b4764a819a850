//! Data-parallel helpers with a sequential fallback.
//!
//! All helpers preserve input order in their output, so results never depend
//! on the thread count. Reductions that feed reported numbers go through
//! [`block_sum`], which sums fixed-size blocks and then adds the block
//! partials left to right.

use serde::{Deserialize, Serialize};

/// How independent work items are executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Execution {
    Sequential,
    /// Uses the rayon pool when the `parallel` feature is enabled.
    #[default]
    Parallel,
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Block length for deterministic reductions.
pub const SUM_BLOCK: usize = 256;

/// `f` applied to every element of `items`, results in input order.
pub fn map<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

/// `f` applied to every index in `0..n`, results in index order.
pub fn map_range<R, F>(exec: Execution, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Runs `f` on every element mutably; returns results in element order.
pub fn for_each_mut<T, R, F>(exec: Execution, items: &mut [T], f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(&mut T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter_mut().map(f).collect();
    }
    let _ = exec;
    items.iter_mut().map(f).collect()
}

/// Sum of `f(item)` with a thread-count independent rounding pattern.
pub fn block_sum<T, F>(exec: Execution, items: &[T], f: F) -> f64
where
    T: Sync,
    F: Fn(&T) -> f64 + Sync + Send,
{
    let blocks: Vec<&[T]> = items.chunks(SUM_BLOCK).collect();
    map(exec, &blocks, |block| block.iter().map(&f).sum::<f64>())
        .into_iter()
        .sum()
}
