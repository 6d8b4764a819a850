//! Lockstep simulation engine for the weighted-aggregation protocols.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use crate::data::DatasetHandle;
use crate::error::{Error, Result};
use crate::models::{Model, ParamVector};
use crate::ordering::judge;
use crate::par;
use crate::rng::{derive_seed, SplitMix64};
use crate::weighting::{
    estimation_error, full_losses, normalize_energies, record_index, RecordSchedule, WeightRule, WeightVector,
};

use super::log::{RoundRecord, TrajectoryLog};
use super::worker::{check_data, evaluate, initial_params, Blend, CommMode, Halt, Plan, Worker};
use super::{weighted_sum, Aggregation, CommConfig, EngineKind, RunOptions, Scheme};

/// Random stream of the coordinator (ζ-mode draws, selections).
pub(crate) const COORDINATOR_STREAM: u64 = u64::MAX;

pub fn run_wasgd_plus_sync(
    model: &dyn Model,
    data: &DatasetHandle,
    cfg: &CommConfig,
    opts: &RunOptions,
) -> Result<TrajectoryLog> {
    let scheme = Scheme::wasgd_plus(cfg)?;
    match opts.engine {
        EngineKind::Simulation => run_weighted(model, data, cfg, &scheme, opts),
        EngineKind::Threaded => super::threaded::run_threaded(model, data, cfg, &scheme, opts, 0),
    }
}

pub fn run_wasgd_sync(
    model: &dyn Model,
    data: &DatasetHandle,
    cfg: &CommConfig,
    opts: &RunOptions,
) -> Result<TrajectoryLog> {
    let scheme = Scheme::wasgd(cfg)?;
    match opts.engine {
        EngineKind::Simulation => run_weighted(model, data, cfg, &scheme, opts),
        EngineKind::Threaded => super::threaded::run_threaded(model, data, cfg, &scheme, opts, 0),
    }
}

/// Multiplicative-weights baseline; `estimated` selects the recorded-loss
/// estimate instead of full-data evaluation.
pub fn run_mwu(
    model: &dyn Model,
    data: &DatasetHandle,
    cfg: &CommConfig,
    estimated: bool,
    opts: &RunOptions,
) -> Result<TrajectoryLog> {
    run_weighted(model, data, cfg, &Scheme::mwu(cfg, estimated)?, opts)
}

pub(crate) fn build_plan(data: &DatasetHandle, cfg: &CommConfig, scheme: &Scheme, opts: &RunOptions) -> Result<Plan> {
    let comm = match cfg.zeta {
        Some(_) => CommMode::External,
        None => CommMode::Periodic(cfg.tau),
    };
    let schedule = match comm {
        // Every step since the previous exchange is recorded.
        CommMode::External => RecordSchedule::every_step(1),
        CommMode::Periodic(_) => scheme.schedule.clone(),
    };
    if scheme.schedule.period() != cfg.tau {
        return Err(Error::config("record schedule period differs from tau"));
    }
    let order = opts.order.clone().unwrap_or_else(|| scheme.order.clone());
    let mut plan = Plan::new(
        data.train().len(),
        cfg.n,
        opts.epochs,
        cfg.eta,
        scheme.beta,
        comm,
        schedule,
        order,
    )?;
    plan.probes = opts
        .estimation_probes
        .iter()
        .map(|&m| record_index(m, cfg.c, cfg.tau))
        .collect::<Result<_>>()?;
    Ok(plan)
}

/// Multiplicative weights carried across rounds.
struct MwuState {
    weights: Vec<f64>,
}

impl MwuState {
    fn update(&mut self, energies: &[f64], a_tilde: f64) -> Result<WeightVector> {
        let factors = match normalize_energies(energies) {
            Ok(h) => h.iter().map(|h| (-a_tilde * h).exp()).collect(),
            Err(Error::DegenerateEnergy(_)) if energies.iter().all(|h| *h == 0.0) => {
                vec![1.0; energies.len()]
            }
            Err(e) => return Err(e),
        };
        for (w, f) in self.weights.iter_mut().zip(factors) {
            *w *= f;
        }
        let total: f64 = self.weights.iter().sum();
        for w in &mut self.weights {
            *w /= total;
        }
        WeightVector::new(self.weights.clone())
    }
}

fn draw_index(theta: &WeightVector, rng: &mut SplitMix64) -> usize {
    let u = rng.next_f64();
    let mut acc = 0.0;
    for (k, t) in theta.as_slice().iter().enumerate() {
        acc += t;
        if u < acc {
            return k;
        }
    }
    theta.len() - 1
}

pub(crate) fn diameter(params: &[&[f64]]) -> f64 {
    let mut d: f64 = 0.0;
    for i in 0..params.len() {
        for j in i + 1..params.len() {
            let dist = params[i]
                .iter()
                .zip(params[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            d = d.max(dist);
        }
    }
    d
}

pub(crate) fn judge_all(energies: &[f64]) -> Vec<f64> {
    if energies.len() < 2 {
        return vec![0.0; energies.len()];
    }
    (0..energies.len())
        .map(|i| judge(energies, i).expect("at least two energies"))
        .collect()
}

fn guard<T>(worker: usize, f: impl FnOnce() -> T) -> Result<T> {
    catch_unwind(AssertUnwindSafe(f)).map_err(|e| Error::Worker {
        worker,
        reason: panic_message(&e),
    })
}

pub(crate) fn panic_message(e: &Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = e.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = e.downcast_ref::<String>() {
        s.clone()
    } else {
        "worker panicked".to_string()
    }
}

/// Runs a weighted protocol in the lockstep simulation engine.
pub fn run_weighted(
    model: &dyn Model,
    data: &DatasetHandle,
    cfg: &CommConfig,
    scheme: &Scheme,
    opts: &RunOptions,
) -> Result<TrajectoryLog> {
    cfg.validate()?;
    opts.validate()?;
    check_data(model, data)?;
    let plan = build_plan(data, cfg, scheme, opts)?;
    let p = cfg.p;
    let exec = opts.execution;
    let start = Instant::now();
    let wall = |start: &Instant| {
        if opts.wall_clock {
            start.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        }
    };

    let labels = data.labels();
    let inits = initial_params(model, cfg.seed, p, opts)?;
    let mut workers: Vec<Worker<'_>> = inits
        .into_iter()
        .enumerate()
        .map(|(i, x0)| {
            Worker::new(
                i,
                model,
                data.train(),
                &labels,
                &plan,
                x0,
                derive_seed(cfg.seed, i as u64),
            )
        })
        .collect();
    let mut coord = SplitMix64::new(derive_seed(cfg.seed, COORDINATOR_STREAM));
    let mut mwu = MwuState {
        weights: vec![1.0 / p as f64; p],
    };

    let mut log = TrajectoryLog::new(&scheme.name, p, cfg.seed);
    let snapshot = |workers: &[Worker<'_>], step: u64, wall_ms: f64| {
        let params: Vec<&ParamVector> = workers.iter().map(|w| &w.x).collect();
        let mut c = evaluate(model, data, &params, exec);
        c.step = step;
        c.wall_ms = wall_ms;
        c
    };
    log.checkpoints.push(snapshot(&workers, 0, 0.0));

    // ζ-mode: the step after which the next exchange happens.
    let draw_next_comm = |coord: &mut SplitMix64, from: u64| -> Option<u64> {
        let zeta = cfg.zeta?;
        if zeta <= 0.0 {
            return Some(u64::MAX);
        }
        let mut t = from;
        while t < plan.total_steps {
            t += 1;
            if coord.bernoulli(zeta) {
                return Some(t);
            }
        }
        Some(u64::MAX)
    };
    let mut next_comm = draw_next_comm(&mut coord, 0);
    let mut next_ckpt = opts.checkpoint_every;

    let mut step = 0u64;
    let mut comm_secs = 0.0;
    while step < plan.total_steps {
        let mut limit = next_ckpt.min(plan.total_steps);
        if let Some(t) = next_comm {
            limit = limit.min(t);
        }
        let halts = par::for_each_mut(exec, &mut workers, |w| {
            let i = w.index;
            guard(i, || w.advance(limit, None))
        });
        let halts = halts.into_iter().collect::<Result<Vec<Halt>>>()?;
        let due = match plan.comm {
            CommMode::Periodic(_) => halts[0] == Halt::Communicate,
            CommMode::External => Some(workers[0].step) == next_comm,
        };
        if due {
            let t0 = Instant::now();
            let record = communicate(
                model,
                data,
                cfg,
                scheme,
                &plan,
                opts,
                &mut workers,
                &mut coord,
                &mut mwu,
                &mut log,
            )?;
            if opts.diagnostics {
                log.rounds.push(record);
            }
            comm_secs += t0.elapsed().as_secs_f64();
            if plan.comm == CommMode::External {
                next_comm = draw_next_comm(&mut coord, workers[0].step);
            }
        }
        step = workers[0].step;
        if step == next_ckpt || (step == plan.total_steps && next_ckpt != step) {
            for w in &workers {
                w.check_finite()?;
            }
            let c = snapshot(&workers, step, wall(&start));
            let hit = opts.loss_threshold.is_some_and(|t| c.train_loss <= t);
            log.checkpoints.push(c);
            if step == next_ckpt {
                next_ckpt += opts.checkpoint_every;
            }
            if hit {
                break;
            }
        }
    }

    log.stats.steps = step;
    log.stats.comm_ms = if opts.wall_clock { comm_secs * 1e3 } else { 0.0 };
    log.stats.wall_ms = wall(&start);
    log.stats.rounds_per_worker = workers.iter().map(|w| w.rounds).collect();
    log.final_params = workers.into_iter().map(|w| w.x).collect();
    Ok(log)
}

#[allow(clippy::too_many_arguments)]
fn communicate(
    model: &dyn Model,
    data: &DatasetHandle,
    cfg: &CommConfig,
    scheme: &Scheme,
    plan: &Plan,
    opts: &RunOptions,
    workers: &mut [Worker<'_>],
    coord: &mut SplitMix64,
    mwu: &mut MwuState,
    log: &mut TrajectoryLog,
) -> Result<RoundRecord> {
    let p = workers.len();
    for w in workers.iter() {
        w.check_finite()?;
    }
    let messages: Vec<_> = workers.iter().map(|w| w.message()).collect();
    let params: Vec<&[f64]> = messages.iter().map(|m| &m.params[..]).collect();
    let mut energies: Vec<f64> = messages.iter().map(|m| m.loss_energy).collect();

    let needs_full = matches!(scheme.aggregation, Aggregation::Multiplicative { full_data: true, .. });
    if needs_full {
        let xs: Vec<ParamVector> = messages.iter().map(|m| m.params.clone()).collect();
        energies = full_losses(model, &xs, data.train(), opts.execution);
        log.stats.extra_loss_evals += (p * data.train().len()) as u64;
    }

    let mut selected = None;
    let (theta, consensus) = match &scheme.aggregation {
        Aggregation::Weighted(rule) => {
            let theta = rule.weights(&energies)?;
            let agg = weighted_sum(&params, theta.as_slice());
            (theta, agg)
        }
        Aggregation::Multiplicative { a_tilde, .. } => {
            let theta = mwu.update(&energies, *a_tilde)?;
            let j = draw_index(&theta, coord);
            selected = Some(j);
            (theta, messages[j].params.clone())
        }
    };

    let estimation_errors = if opts.estimation_probes.is_empty() {
        Vec::new()
    } else {
        let a_tilde = match &scheme.aggregation {
            Aggregation::Weighted(WeightRule::Boltzmann { a_tilde }) => *a_tilde,
            _ => cfg.a_tilde,
        };
        let rule = WeightRule::Boltzmann { a_tilde };
        let xs: Vec<ParamVector> = messages.iter().map(|m| m.params.clone()).collect();
        let truth = rule.weights(&full_losses(model, &xs, data.train(), opts.execution))?;
        let mut errs = vec![estimation_error(&rule.weights(&energies)?, &truth)?];
        for k in 0..plan.probes.len() {
            let probe: Vec<f64> = workers.iter().map(|w| w.probes[k].raw).collect();
            errs.push(estimation_error(&rule.weights(&probe)?, &truth)?);
        }
        errs
    };

    let scores = if plan.order == super::OrderPolicy::Scored {
        judge_all(&energies)
    } else {
        vec![0.0; p]
    };

    let blend_to = if scheme.beta > 0.0 { Some(&consensus[..]) } else { None };
    par::for_each_mut(opts.execution, workers, |w| {
        let blend = match blend_to {
            Some(a) => Blend::Toward(a),
            None => Blend::Keep,
        };
        w.complete_round(blend, scores[w.index]);
    });
    log.stats.rounds += 1;
    log.stats.messages_consumed.extend(std::iter::repeat_n(p, p));

    let diameter = if opts.diagnostics {
        let blended: Vec<ParamVector> = match blend_to {
            Some(a) => params
                .iter()
                .map(|x| {
                    if scheme.beta == 1.0 {
                        a.to_vec().into()
                    } else {
                        x.iter()
                            .zip(a)
                            .map(|(x, a)| super::blend(*x, *a, scheme.beta))
                            .collect::<Vec<_>>()
                            .into()
                    }
                })
                .collect(),
            None => params.iter().map(|x| x.to_vec().into()).collect(),
        };
        let refs: Vec<&[f64]> = blended.iter().map(|x| &x[..]).collect();
        diameter(&refs)
    } else {
        0.0
    };

    Ok(RoundRecord {
        round: log.stats.rounds,
        step: workers[0].step,
        worker: None,
        participants: (0..p).collect(),
        energies,
        weights: theta,
        scores,
        consensus,
        diameter,
        estimation_errors,
        selected,
    })
}
