//! Sample orders: seeded generation, per-communication scoring, and
//! retention of orders that performed well.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::{permutation, SplitMix64};

/// Accumulated scores at or below this value keep the chunk's order.
pub const RETAIN_THRESHOLD: f64 = -1.0;

/// A seeded permutation of one data chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOrder {
    pub permutation: Vec<usize>,
    pub seed: u64,
    pub score: f64,
}

impl SampleOrder {
    pub fn from_seed(seed: u64, length: usize) -> Self {
        Self {
            permutation: permutation(seed, length),
            seed,
            score: 0.0,
        }
    }
}

/// Standardized loss `(hᵢ − mean) / s` with the `(p − 1)`-denominator
/// standard deviation. Ties (zero spread) score 0.
pub fn judge(h: &[f64], i: usize) -> Result<f64> {
    let p = h.len();
    if p < 2 {
        return Err(Error::config("judge needs at least two workers"));
    }
    if i >= p {
        return Err(Error::config(format!("worker {i} out of range for {p} energies")));
    }
    let mean = h.iter().sum::<f64>() / p as f64;
    let var = h.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (p - 1) as f64;
    let sd = var.sqrt();
    if sd == 0.0 {
        return Ok(0.0);
    }
    Ok((h[i] - mean) / sd)
}

/// Keeps `old_seed` when `total_score <= -1`; otherwise draws a fresh seed
/// from `rng`. Returns the order for that seed and the seed itself.
pub fn order_gen(total_score: f64, old_seed: u64, length: usize, rng: &mut SplitMix64) -> (SampleOrder, u64) {
    let seed = if total_score <= RETAIN_THRESHOLD {
        old_seed
    } else {
        rng.next_u64()
    };
    let mut order = SampleOrder::from_seed(seed, length);
    order.score = total_score;
    (order, seed)
}

/// Permutation in which samples come in runs of `delta` consecutive samples
/// sharing a label.
///
/// Each class is shuffled and cut into runs of `delta` (the last run of a
/// class may be shorter). Runs are then emitted round by round: every round
/// takes the next run of each class still holding runs, in a random class
/// order, swapping the head of the round if it would repeat the label that
/// ended the previous round.
pub fn grouped_order(labels: &[usize], delta: usize, rng: &mut SplitMix64) -> Vec<usize> {
    assert!(delta >= 1, "delta must be at least 1");
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (idx, label) in labels.iter().enumerate() {
        by_class.entry(*label).or_default().push(idx);
    }
    let mut runs: Vec<(usize, Vec<Vec<usize>>)> = by_class
        .into_iter()
        .map(|(label, mut idx)| {
            rng.shuffle(&mut idx);
            let mut chunks: Vec<Vec<usize>> = idx.chunks(delta).map(<[usize]>::to_vec).collect();
            chunks.reverse();
            (label, chunks)
        })
        .collect();

    let mut out = Vec::with_capacity(labels.len());
    let mut last_label: Option<usize> = None;
    loop {
        let mut round: Vec<usize> = (0..runs.len()).filter(|&k| !runs[k].1.is_empty()).collect();
        if round.is_empty() {
            break;
        }
        rng.shuffle(&mut round);
        if round.len() > 1 && Some(runs[round[0]].0) == last_label {
            round.swap(0, 1);
        }
        for k in round {
            let run = runs[k].1.pop().expect("non-empty by construction");
            last_label = Some(runs[k].0);
            out.extend(run);
        }
    }
    out
}

/// Per-chunk scores and seeds of one worker.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBoard {
    scores: Vec<f64>,
    seeds: Vec<u64>,
    running: Vec<f64>,
}

impl ScoreBoard {
    pub fn new(chunks: usize) -> Self {
        Self {
            scores: vec![0.0; chunks],
            seeds: vec![0; chunks],
            running: vec![0.0; chunks],
        }
    }

    pub fn chunks(&self) -> usize {
        self.scores.len()
    }

    pub fn score(&self, chunk: usize) -> f64 {
        self.scores[chunk]
    }

    pub fn seed(&self, chunk: usize) -> u64 {
        self.seeds[chunk]
    }

    pub fn running_score(&self, chunk: usize) -> f64 {
        self.running[chunk]
    }

    /// Adds one communication's judge score to chunk `chunk`'s running total.
    pub fn accumulate_score(&mut self, chunk: usize, s: f64) {
        self.running[chunk] += s;
    }

    /// Produces the order for a pass over `chunk` from the score stored at
    /// the end of its previous pass.
    pub fn begin_chunk(&mut self, chunk: usize, length: usize, rng: &mut SplitMix64) -> SampleOrder {
        let (order, seed) = order_gen(self.scores[chunk], self.seeds[chunk], length, rng);
        self.seeds[chunk] = seed;
        order
    }

    /// Writes the running total back as the chunk's score and clears it.
    pub fn commit_chunk(&mut self, chunk: usize) {
        self.scores[chunk] = self.running[chunk];
        self.running[chunk] = 0.0;
    }
}
