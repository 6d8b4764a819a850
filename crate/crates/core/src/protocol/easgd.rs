//! Elastic averaging SGD baseline.

use std::time::Instant;

use crate::data::DatasetHandle;
use crate::error::{Error, Result};
use crate::models::{Model, ParamVector};
use crate::par;
use crate::rng::derive_seed;
use crate::weighting::record_index;

use super::engine::diameter;
use super::log::{RoundRecord, TrajectoryLog};
use super::worker::{check_data, evaluate, initial_params, Blend, CommMode, Halt, Plan, Worker};
use super::{weighted_sum, CommConfig, OrderPolicy, RunOptions};
use crate::weighting::WeightVector;

/// `(1 − pα)^p > α`, the requirement on the moving rate for the center
/// variable not to dominate the workers.
pub fn easgd_condition(p: usize, alpha: f64) -> bool {
    (1.0 - p as f64 * alpha).powi(p as i32) > alpha
}

/// `α < 1 / (1 + p²)`, which implies [`easgd_condition`].
pub fn easgd_sufficient_condition(p: usize, alpha: f64) -> bool {
    alpha < 1.0 / (1.0 + (p * p) as f64)
}

/// Every `τ` steps each worker takes `xᵢ ← xᵢ − η g(xᵢ) − α (xᵢ − x̃)` and
/// the center takes `x̃ ← (1 − pα) x̃ + α Σ xᵢ`, both from the values before
/// the round. Other steps are plain SGD. Checkpoints evaluate the center.
pub fn run_easgd(
    model: &dyn Model,
    data: &DatasetHandle,
    cfg: &CommConfig,
    opts: &RunOptions,
) -> Result<TrajectoryLog> {
    cfg.validate()?;
    opts.validate()?;
    check_data(model, data)?;
    if cfg.zeta.is_some() {
        return Err(Error::config("EASGD communicates periodically; unset zeta"));
    }
    let p = cfg.p;
    let alpha = cfg.alpha();
    let order = opts.order.clone().unwrap_or(OrderPolicy::Shuffled);
    let plan = Plan::new(
        data.train().len(),
        cfg.n,
        opts.epochs,
        cfg.eta,
        1.0,
        CommMode::Periodic(cfg.tau),
        record_index(1, 1, cfg.tau)?,
        order,
    )?;
    let labels = data.labels();
    let inits = initial_params(model, cfg.seed, p, opts)?;
    let mut center = {
        let refs: Vec<&[f64]> = inits.iter().map(|x| &x[..]).collect();
        weighted_sum(&refs, &vec![1.0 / p as f64; p])
    };
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

    let start = Instant::now();
    let wall = || {
        if opts.wall_clock {
            start.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        }
    };
    let mut log = TrajectoryLog::new("easgd", p, cfg.seed);
    let snapshot = |center: &ParamVector, step: u64, wall_ms: f64| {
        let mut c = evaluate(model, data, &[center], opts.execution);
        c.step = step;
        c.wall_ms = wall_ms;
        c
    };
    log.checkpoints.push(snapshot(&center, 0, 0.0));
    let mut next_ckpt = opts.checkpoint_every;
    let mut step = 0;
    let mut comm_secs = 0.0;
    while step < plan.total_steps {
        let limit = next_ckpt.min(plan.total_steps);
        let halts = par::for_each_mut(opts.execution, &mut workers, |w| w.advance(limit, None));
        if halts[0] == Halt::Communicate {
            let t0 = Instant::now();
            for w in &workers {
                w.check_finite()?;
            }
            let sum = {
                let refs: Vec<&[f64]> = workers.iter().map(|w| &w.x[..]).collect();
                weighted_sum(&refs, &vec![1.0; p])
            };
            let next_center: ParamVector = center
                .iter()
                .zip(sum.iter())
                .map(|(c, s)| (1.0 - p as f64 * alpha) * c + alpha * s)
                .collect::<Vec<_>>()
                .into();
            let old = &center;
            par::for_each_mut(opts.execution, &mut workers, |w| {
                w.complete_round(Blend::Elastic { center: old, alpha }, 0.0)
            });
            center = next_center;
            log.stats.rounds += 1;
            log.stats.messages_consumed.extend(std::iter::repeat_n(p, p));
            comm_secs += t0.elapsed().as_secs_f64();
            if opts.diagnostics {
                let refs: Vec<&[f64]> = workers.iter().map(|w| &w.x[..]).collect();
                log.rounds.push(RoundRecord {
                    round: log.stats.rounds,
                    step: workers[0].step,
                    worker: None,
                    participants: (0..p).collect(),
                    energies: Vec::new(),
                    weights: WeightVector::uniform(p),
                    scores: Vec::new(),
                    consensus: center.clone(),
                    diameter: diameter(&refs),
                    estimation_errors: Vec::new(),
                    selected: None,
                });
            }
        }
        step = workers[0].step;
        if step == next_ckpt || (step == plan.total_steps && next_ckpt != step) {
            if !center.is_finite() {
                return Err(Error::Instability(format!("center diverged at step {step}")));
            }
            let c = snapshot(&center, step, wall());
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
    log.stats.wall_ms = wall();
    log.stats.rounds_per_worker = workers.iter().map(|w| w.rounds).collect();
    log.final_params = workers.into_iter().map(|w| w.x).collect();
    log.center = Some(center);
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_two_level;
    use crate::models::ConstantFit;

    #[test]
    fn zero_moving_rate_freezes_the_center() {
        let data = synth_two_level(20, 0.0, 2.0).unwrap();
        let model = ConstantFit { init: 5.0 };
        let cfg = CommConfig {
            p: 3,
            tau: 5,
            m: 1,
            c: 1,
            alpha: Some(0.0),
            eta: 0.1,
            ..Default::default()
        };
        let log = run_easgd(&model, &data, &cfg, &RunOptions::default()).unwrap();
        assert_eq!(log.center.unwrap()[0], 5.0);
        assert!(log
            .checkpoints
            .iter()
            .all(|c| c.train_loss == log.checkpoints[0].train_loss));
        // Workers moved on their own.
        assert!(log.final_params.iter().all(|x| x[0] < 5.0));
    }

    #[test]
    fn sufficient_condition_implies_condition() {
        for p in 1..=64usize {
            for k in 0..2000 {
                let alpha = k as f64 / 2000.0;
                if easgd_sufficient_condition(p, alpha) {
                    assert!(easgd_condition(p, alpha), "p = {p}, alpha = {alpha}");
                }
            }
        }
        assert!(easgd_condition(4, 0.01));
        assert!(!easgd_condition(4, 0.3));
    }

    #[test]
    fn two_worker_scalar_trace() {
        // Targets 0, 0, 2, 2 visited in order; workers start at 1 and 3.
        let data = synth_two_level(4, 0.0, 2.0).unwrap();
        let model = ConstantFit { init: 0.0 };
        let cfg = CommConfig {
            p: 2,
            tau: 1,
            m: 1,
            c: 1,
            alpha: Some(0.1),
            eta: 0.5,
            ..Default::default()
        };
        let opts = RunOptions {
            order: Some(OrderPolicy::Identity),
            inits: Some(vec![ParamVector::new(vec![1.0]), ParamVector::new(vec![3.0])]),
            ..Default::default()
        };
        let log = run_easgd(&model, &data, &cfg, &opts).unwrap();
        assert_eq!(log.stats.rounds, 4);
        assert!((log.final_params[0][0] - 2123.0 / 1250.0).abs() < 1e-12);
        assert!((log.final_params[1][0] - 2187.0 / 1250.0).abs() < 1e-12);
        assert!((log.center.unwrap()[0] - 383.0 / 250.0).abs() < 1e-12);
    }

    #[test]
    fn zeta_is_rejected() {
        let data = synth_two_level(4, 0.0, 2.0).unwrap();
        let cfg = CommConfig {
            p: 2,
            tau: 1,
            zeta: Some(0.5),
            ..Default::default()
        };
        assert!(matches!(
            run_easgd(&ConstantFit { init: 0.0 }, &data, &cfg, &RunOptions::default()),
            Err(Error::Config(_))
        ));
    }
}
