//! Per-worker state machine shared by every engine.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use crate::data::DatasetHandle;
use crate::error::{Error, Result};
use crate::models::{Model, ParamVector, Sample};
use crate::ordering::{grouped_order, ScoreBoard};
use crate::par::{self, Execution};
use crate::rng::{permutation, SplitMix64};
use crate::weighting::{LossEnergy, RecordSchedule};

use super::{Checkpoint, OrderPolicy, RunOptions, WorkerMessage};

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum CommMode {
    /// After the gradient of every `tau`-th chunk step is computed.
    Periodic(usize),
    /// Decided by the coordinator after whole steps.
    External,
}

/// Read-only run description shared by all workers.
#[derive(Debug, Clone)]
pub(crate) struct Plan {
    pub eta: f64,
    pub beta: f64,
    pub comm: CommMode,
    pub chunks: usize,
    pub chunk_len: usize,
    pub schedule: RecordSchedule,
    pub probes: Vec<RecordSchedule>,
    pub order: OrderPolicy,
    pub total_steps: u64,
}

impl Plan {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        train_len: usize,
        chunks: usize,
        epochs: usize,
        eta: f64,
        beta: f64,
        comm: CommMode,
        schedule: RecordSchedule,
        order: OrderPolicy,
    ) -> Result<Self> {
        if chunks == 0 || !train_len.is_multiple_of(chunks) {
            return Err(Error::config(format!(
                "n = {chunks} must divide the training set size {train_len}"
            )));
        }
        let chunk_len = train_len / chunks;
        if let CommMode::Periodic(tau) = comm {
            if tau > chunk_len {
                return Err(Error::config(format!(
                    "tau = {tau} exceeds the chunk length {chunk_len}; no communication would occur"
                )));
            }
        }
        match &order {
            OrderPolicy::Grouped { delta } if *delta == 0 => {
                return Err(Error::config("delta must be at least 1"));
            }
            OrderPolicy::Explicit(orders) => {
                for o in orders {
                    let mut sorted = o.clone();
                    sorted.sort_unstable();
                    if sorted != (0..train_len).collect::<Vec<_>>() {
                        return Err(Error::config(
                            "explicit orders must be permutations of the training indices",
                        ));
                    }
                }
            }
            _ => {}
        }
        Ok(Self {
            eta,
            beta,
            comm,
            chunks,
            chunk_len,
            schedule,
            probes: Vec::new(),
            order,
            total_steps: (epochs * train_len) as u64,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Halt {
    /// A gradient is pending and the worker waits for a communication.
    Communicate,
    /// The step limit was reached.
    Limit,
    Stopped,
}

/// How the parameters change when a round completes.
pub(crate) enum Blend<'a> {
    Keep,
    /// `(1 − β) x + β a` with the plan's β.
    Toward(&'a [f64]),
    /// `x − η g − α (x − center)`, which also applies the pending gradient.
    Elastic {
        center: &'a [f64],
        alpha: f64,
    },
}

pub(crate) struct Worker<'a> {
    pub index: usize,
    model: &'a dyn Model,
    train: &'a [Sample],
    labels: &'a [usize],
    plan: &'a Plan,
    pub x: ParamVector,
    grad: Vec<f64>,
    pub energy: LossEnergy,
    pub probes: Vec<LossEnergy>,
    board: ScoreBoard,
    rng: SplitMix64,
    order: Vec<usize>,
    chunk: usize,
    pos: usize,
    pub step: u64,
    pub rounds: u64,
    pending: bool,
    pub delay: Option<Duration>,
}

impl<'a> Worker<'a> {
    pub fn new(
        index: usize,
        model: &'a dyn Model,
        train: &'a [Sample],
        labels: &'a [usize],
        plan: &'a Plan,
        x0: ParamVector,
        seed: u64,
    ) -> Self {
        Self {
            index,
            model,
            train,
            labels,
            plan,
            grad: vec![0.0; x0.dim()],
            x: x0,
            energy: LossEnergy::default(),
            probes: vec![LossEnergy::default(); plan.probes.len()],
            board: ScoreBoard::new(plan.chunks),
            rng: SplitMix64::new(seed),
            order: Vec::new(),
            chunk: 0,
            pos: 0,
            step: 0,
            rounds: 0,
            pending: false,
            delay: None,
        }
    }

    fn begin_chunk(&mut self) {
        self.energy.reset();
        self.probes.iter_mut().for_each(LossEnergy::reset);
        let len = self.plan.chunk_len;
        let offset = self.chunk * len;
        self.order = match &self.plan.order {
            OrderPolicy::Scored => {
                let order = self.board.begin_chunk(self.chunk, len, &mut self.rng);
                order.permutation.into_iter().map(|k| offset + k).collect()
            }
            OrderPolicy::Shuffled => permutation(self.rng.next_u64(), len)
                .into_iter()
                .map(|k| offset + k)
                .collect(),
            OrderPolicy::Identity => (offset..offset + len).collect(),
            OrderPolicy::Grouped { delta } => grouped_order(&self.labels[offset..offset + len], *delta, &mut self.rng)
                .into_iter()
                .map(|k| offset + k)
                .collect(),
            OrderPolicy::Explicit(orders) => orders[self.index % orders.len()][offset..offset + len].to_vec(),
        };
    }

    /// Steps until `limit` steps are done or a communication is due.
    pub fn advance(&mut self, limit: u64, stop: Option<&AtomicBool>) -> Halt {
        debug_assert!(!self.pending);
        while self.step < limit {
            if stop.is_some_and(|s| s.load(Ordering::Relaxed)) {
                return Halt::Stopped;
            }
            if self.pos == 0 {
                self.begin_chunk();
            }
            if let Some(d) = self.delay {
                std::thread::sleep(d);
            }
            let sample = &self.train[self.order[self.pos]];
            let loss = self.model.loss_grad_into(&self.x, sample, &mut self.grad);
            if self.plan.schedule.contains(self.pos) {
                self.energy.record(loss);
            }
            for (e, s) in self.probes.iter_mut().zip(&self.plan.probes) {
                if s.contains(self.pos) {
                    e.record(loss);
                }
            }
            if let CommMode::Periodic(tau) = self.plan.comm {
                if (self.pos + 1).is_multiple_of(tau) {
                    self.pending = true;
                    return Halt::Communicate;
                }
            }
            self.x.sub_scaled(self.plan.eta, &self.grad);
            self.finish_step();
        }
        Halt::Limit
    }

    fn finish_step(&mut self) {
        self.pos += 1;
        self.step += 1;
        if self.pos == self.plan.chunk_len {
            if self.plan.order == OrderPolicy::Scored {
                self.board.commit_chunk(self.chunk);
            }
            self.chunk = (self.chunk + 1) % self.plan.chunks;
            self.pos = 0;
        }
    }

    pub fn message(&self) -> WorkerMessage {
        WorkerMessage {
            loss_energy: self.energy.raw,
            params: self.x.clone(),
            worker_index: self.index,
        }
    }

    /// Applies the round's blend and score, resets the loss energy and
    /// finishes the pending step if there is one.
    pub fn complete_round(&mut self, blend: Blend<'_>, score: f64) {
        let beta = self.plan.beta;
        let eta = self.plan.eta;
        match blend {
            Blend::Keep => {}
            Blend::Toward(a) => {
                if beta == 1.0 {
                    self.x.copy_from_slice(a);
                } else if beta > 0.0 {
                    for (x, a) in self.x.iter_mut().zip(a) {
                        *x = super::blend(*x, *a, beta);
                    }
                }
            }
            Blend::Elastic { center, alpha } => {
                let g = if self.pending { &self.grad[..] } else { &[][..] };
                for (k, (x, c)) in self.x.iter_mut().zip(center).enumerate() {
                    let gk = g.get(k).copied().unwrap_or(0.0);
                    *x = *x - eta * gk - alpha * (*x - c);
                }
                if self.pending {
                    self.pending = false;
                    self.finish_step();
                }
            }
        }
        if self.plan.order == OrderPolicy::Scored {
            self.board.accumulate_score(self.chunk, score);
        }
        self.energy.reset();
        self.probes.iter_mut().for_each(LossEnergy::reset);
        self.rounds += 1;
        if self.pending {
            self.x.sub_scaled(eta, &self.grad);
            self.pending = false;
            self.finish_step();
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.x.is_finite() {
            Ok(())
        } else {
            Err(Error::Instability(format!(
                "worker {} has non-finite parameters at step {}",
                self.index, self.step
            )))
        }
    }
}

/// Train and test metrics averaged over the given parameter vectors.
pub(crate) fn evaluate(
    model: &dyn Model,
    data: &DatasetHandle,
    params: &[&ParamVector],
    exec: Execution,
) -> Checkpoint {
    let mean_over = |set: &[Sample], x: &ParamVector| -> (f64, Option<f64>) {
        let n = set.len() as f64;
        let loss = par::block_sum(exec, set, |s| model.loss_unchecked(x, s)) / n;
        let err = model
            .error_unchecked(x, &set[0])
            .map(|_| par::block_sum(exec, set, |s| model.error_unchecked(x, s).unwrap_or(0.0)) / n);
        (loss, err)
    };
    let k = params.len() as f64;
    let mut train_loss = 0.0;
    let mut train_err: Option<f64> = None;
    let mut test_loss: Option<f64> = None;
    let mut test_err: Option<f64> = None;
    for x in params {
        let (l, e) = mean_over(data.train(), x);
        train_loss += l;
        if let Some(e) = e {
            *train_err.get_or_insert(0.0) += e;
        }
        if !data.test().is_empty() {
            let (l, e) = mean_over(data.test(), x);
            *test_loss.get_or_insert(0.0) += l;
            if let Some(e) = e {
                *test_err.get_or_insert(0.0) += e;
            }
        }
    }
    Checkpoint {
        step: 0,
        wall_ms: 0.0,
        train_loss: train_loss / k,
        train_err: train_err.map(|e| e / k),
        test_loss: test_loss.map(|l| l / k),
        test_err: test_err.map(|e| e / k),
    }
}

/// Initial parameters for `count` workers.
pub(crate) fn initial_params(
    model: &dyn Model,
    seed: u64,
    count: usize,
    opts: &RunOptions,
) -> Result<Vec<ParamVector>> {
    match &opts.inits {
        Some(inits) => {
            if inits.len() != count {
                return Err(Error::config(format!(
                    "{} initial vectors for {count} workers",
                    inits.len()
                )));
            }
            for x in inits {
                if x.dim() != model.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: model.dim(),
                        got: x.dim(),
                    });
                }
            }
            Ok(inits.clone())
        }
        None => Ok(vec![model.init_params(seed); count]),
    }
}

/// Checks that the model accepts the data.
pub(crate) fn check_data(model: &dyn Model, data: &DatasetHandle) -> Result<()> {
    if data.train().is_empty() {
        return Err(Error::config("training set is empty"));
    }
    for s in &data.samples {
        model.check_sample(s)?;
    }
    Ok(())
}
