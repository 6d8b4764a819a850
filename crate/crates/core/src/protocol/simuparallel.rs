//! SimuParallel SGD: independent training on disjoint shards, one average
//! at the end.

use std::time::Instant;

use crate::data::DatasetHandle;
use crate::error::{Error, Result};
use crate::models::{Model, ParamVector};
use crate::par;
use crate::rng::derive_seed;
use crate::weighting::RecordSchedule;

use super::log::TrajectoryLog;
use super::worker::{check_data, evaluate, initial_params, CommMode, Plan, Worker};
use super::{weighted_sum, CommConfig, OrderPolicy, RunOptions};

fn average(xs: &[&ParamVector]) -> ParamVector {
    let refs: Vec<&[f64]> = xs.iter().map(|x| &x[..]).collect();
    weighted_sum(&refs, &vec![1.0 / xs.len() as f64; xs.len()])
}

/// Worker `i` trains on the `i`-th of `p` contiguous shards. Checkpoints
/// report the equal-weight average of the current worker parameters.
pub fn run_simuparallel(
    model: &dyn Model,
    data: &DatasetHandle,
    cfg: &CommConfig,
    opts: &RunOptions,
) -> Result<TrajectoryLog> {
    cfg.validate()?;
    opts.validate()?;
    check_data(model, data)?;
    let p = cfg.p;
    let train = data.train();
    if !train.len().is_multiple_of(p) {
        return Err(Error::config(format!(
            "{} training samples cannot be split evenly across {p} workers",
            train.len()
        )));
    }
    let shard = train.len() / p;
    let order = opts.order.clone().unwrap_or(OrderPolicy::Shuffled);
    let plan = Plan::new(
        shard,
        1,
        opts.epochs,
        cfg.eta,
        1.0,
        CommMode::External,
        RecordSchedule::every_step(1),
        order,
    )?;
    let labels = data.labels();
    let inits = initial_params(model, cfg.seed, p, opts)?;
    let mut workers: Vec<Worker<'_>> = inits
        .into_iter()
        .enumerate()
        .map(|(i, x0)| {
            let range = i * shard..(i + 1) * shard;
            Worker::new(
                i,
                model,
                &train[range.clone()],
                &labels[range],
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
    let mut log = TrajectoryLog::new("simuparallel", p, cfg.seed);
    let snapshot = |workers: &[Worker<'_>], step: u64, wall_ms: f64| {
        let xs: Vec<&ParamVector> = workers.iter().map(|w| &w.x).collect();
        let avg = average(&xs);
        let mut c = evaluate(model, data, &[&avg], opts.execution);
        c.step = step;
        c.wall_ms = wall_ms;
        c
    };
    log.checkpoints.push(snapshot(&workers, 0, 0.0));
    let mut step = 0;
    while step < plan.total_steps {
        let limit = (step + opts.checkpoint_every).min(plan.total_steps);
        par::for_each_mut(opts.execution, &mut workers, |w| {
            w.advance(limit, None);
        });
        step = limit;
        for w in &workers {
            w.check_finite()?;
        }
        let c = snapshot(&workers, step, wall());
        let hit = opts.loss_threshold.is_some_and(|t| c.train_loss <= t);
        log.checkpoints.push(c);
        if hit {
            break;
        }
    }
    let xs: Vec<&ParamVector> = workers.iter().map(|w| &w.x).collect();
    log.center = Some(average(&xs));
    log.stats.steps = step;
    log.stats.wall_ms = wall();
    log.final_params = workers.into_iter().map(|w| w.x).collect();
    Ok(log)
}
