//! One thread per worker, message passing over channels.
//!
//! At round `r` a worker sends its message to every peer and proceeds as
//! soon as it holds `p − 1` peer messages of round `r`. Messages of later
//! rounds are buffered; messages of rounds it has already left are dropped.
//! With no backups this is a full barrier. The run ends once `p` workers
//! have finished; remaining backups are stopped.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::{Duration, Instant};

use crate::data::DatasetHandle;
use crate::error::{Error, Result};
use crate::models::{Model, ParamVector};
use crate::rng::derive_seed;

use super::engine::{build_plan, diameter, judge_all, panic_message};
use super::log::{RoundRecord, TrajectoryLog};
use super::worker::{check_data, evaluate, initial_params, Blend, Halt, Plan, Worker};
use super::{weighted_sum, Aggregation, CommConfig, RunOptions, Scheme, WorkerMessage};

const POLL: Duration = Duration::from_millis(2);

/// Asynchronous WASGD+ with `cfg.b` backup workers.
pub fn run_wasgd_plus_async(
    model: &dyn Model,
    data: &DatasetHandle,
    cfg: &CommConfig,
    opts: &RunOptions,
) -> Result<TrajectoryLog> {
    let scheme = Scheme::wasgd_plus(cfg)?;
    let mut log = run_threaded(model, data, cfg, &scheme, opts, cfg.b)?;
    log.protocol = "wasgd+async".into();
    Ok(log)
}

struct Envelope {
    round: u64,
    msg: WorkerMessage,
}

enum Event {
    Snapshot {
        worker: usize,
        step: u64,
        params: ParamVector,
        wall_ms: f64,
    },
    Round {
        record: RoundRecord,
        consumed: usize,
    },
    Done {
        worker: usize,
        params: ParamVector,
        rounds: u64,
        discarded: u64,
        comm_secs: f64,
    },
    Failed(Error),
}

struct Shared<'a> {
    model: &'a dyn Model,
    data: &'a DatasetHandle,
    labels: &'a [usize],
    plan: &'a Plan,
    scheme: &'a Scheme,
    opts: &'a RunOptions,
    p: usize,
    stop: &'a AtomicBool,
    start: Instant,
}

pub(crate) fn run_threaded(
    model: &dyn Model,
    data: &DatasetHandle,
    cfg: &CommConfig,
    scheme: &Scheme,
    opts: &RunOptions,
    backups: usize,
) -> Result<TrajectoryLog> {
    cfg.validate()?;
    opts.validate()?;
    check_data(model, data)?;
    if cfg.zeta.is_some() {
        return Err(Error::config(
            "the threaded engine communicates periodically; unset zeta",
        ));
    }
    if !matches!(scheme.aggregation, Aggregation::Weighted(_)) {
        return Err(Error::config("the threaded engine supports weighted aggregation only"));
    }
    if !opts.estimation_probes.is_empty() {
        return Err(Error::config("estimation probes need the simulation engine"));
    }
    let plan = build_plan(data, cfg, scheme, opts)?;
    let p = cfg.p;
    let total = p + backups;
    let labels = data.labels();
    let inits = match &opts.inits {
        Some(_) => initial_params(model, cfg.seed, total, opts)?,
        None => vec![model.init_params(cfg.seed); total],
    };

    let stop = AtomicBool::new(false);
    let shared = Shared {
        model,
        data,
        labels: &labels,
        plan: &plan,
        scheme,
        opts,
        p,
        stop: &stop,
        start: Instant::now(),
    };
    let mut log = TrajectoryLog::new(&scheme.name, p, cfg.seed);
    {
        let first: Vec<&ParamVector> = inits.iter().take(p).collect();
        log.checkpoints.push(evaluate(model, data, &first, opts.execution));
    }

    let (inbox_tx, inbox_rx): (Vec<Sender<Envelope>>, Vec<Receiver<Envelope>>) =
        (0..total).map(|_| mpsc::channel()).unzip();
    let (event_tx, event_rx) = mpsc::channel::<Event>();

    let mut finals: Vec<Option<ParamVector>> = vec![None; total];
    let mut rounds_per_worker = vec![0u64; total];
    let mut first_error: Option<Error> = None;
    let mut comm_secs = 0.0;

    std::thread::scope(|scope| {
        for (i, (rx, x0)) in inbox_rx.into_iter().zip(inits).enumerate() {
            let peers: Vec<(usize, Sender<Envelope>)> = inbox_tx
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(j, tx)| (j, tx.clone()))
                .collect();
            let events = event_tx.clone();
            let shared = &shared;
            let seed = derive_seed(cfg.seed, i as u64);
            scope.spawn(move || {
                let outcome = catch_unwind(AssertUnwindSafe(|| {
                    worker_loop(shared, i, x0, seed, &peers, &rx, &events)
                }));
                let failure = match outcome {
                    Ok(Ok(())) => None,
                    Ok(Err(e)) => Some(e),
                    Err(panic) => Some(Error::Worker {
                        worker: i,
                        reason: panic_message(&panic),
                    }),
                };
                if let Some(e) = failure {
                    shared.stop.store(true, Ordering::SeqCst);
                    let _ = events.send(Event::Failed(e));
                }
            });
        }
        drop(event_tx);
        drop(inbox_tx);

        let mut pending: BTreeMap<u64, Vec<(usize, ParamVector, f64)>> = BTreeMap::new();
        let mut done = 0usize;
        for event in event_rx {
            match event {
                Event::Snapshot {
                    worker,
                    step,
                    params,
                    wall_ms,
                } => {
                    let entry = pending.entry(step).or_default();
                    if entry.len() == p {
                        continue;
                    }
                    entry.push((worker, params, wall_ms));
                    if entry.len() == p {
                        let mut chosen: Vec<&(usize, ParamVector, f64)> = entry.iter().collect();
                        chosen.sort_by_key(|e| e.0);
                        let xs: Vec<&ParamVector> = chosen.iter().map(|e| &e.1).collect();
                        let mut c = evaluate(model, data, &xs, opts.execution);
                        c.step = step;
                        c.wall_ms = chosen.iter().map(|e| e.2).fold(0.0, f64::max);
                        if opts.loss_threshold.is_some_and(|t| c.train_loss <= t) {
                            stop.store(true, Ordering::SeqCst);
                        }
                        log.checkpoints.push(c);
                        // Keep the marker, drop the parameters.
                        entry.iter_mut().for_each(|e| e.1 = ParamVector::default());
                    }
                }
                Event::Round { record, consumed } => {
                    log.stats.messages_consumed.push(consumed);
                    if opts.diagnostics {
                        log.rounds.push(record);
                    }
                }
                Event::Done {
                    worker,
                    params,
                    rounds,
                    discarded,
                    comm_secs: secs,
                } => {
                    finals[worker] = Some(params);
                    rounds_per_worker[worker] = rounds;
                    log.stats.messages_discarded += discarded;
                    comm_secs += secs;
                    done += 1;
                    if done >= p {
                        stop.store(true, Ordering::SeqCst);
                    }
                }
                Event::Failed(e) => {
                    stop.store(true, Ordering::SeqCst);
                    first_error.get_or_insert(e);
                }
            }
        }
    });

    if let Some(e) = first_error {
        return Err(e);
    }
    log.checkpoints.sort_by_key(|c| c.step);
    if opts.wall_clock {
        log.stats.wall_ms = shared.start.elapsed().as_secs_f64() * 1e3;
        log.stats.comm_ms = comm_secs * 1e3;
    }
    let mut sorted = rounds_per_worker.clone();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    log.stats.rounds = sorted[p - 1];
    log.stats.rounds_per_worker = rounds_per_worker;
    log.stats.steps = log.checkpoints.last().map_or(0, |c| c.step);
    log.final_params = finals
        .into_iter()
        .enumerate()
        .map(|(i, x)| {
            x.ok_or(Error::Worker {
                worker: i,
                reason: "no final parameters".into(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(log)
}

fn worker_loop(
    sh: &Shared<'_>,
    index: usize,
    x0: ParamVector,
    seed: u64,
    peers: &[(usize, Sender<Envelope>)],
    inbox: &Receiver<Envelope>,
    events: &Sender<Event>,
) -> Result<()> {
    let plan = sh.plan;
    let mut w = Worker::new(index, sh.model, sh.data.train(), sh.labels, plan, x0, seed);
    w.delay = sh.opts.step_delays.get(index).copied().filter(|d| !d.is_zero());
    let every = sh.opts.checkpoint_every;
    let mut next_ckpt = every;
    let mut buffer: BTreeMap<u64, Vec<WorkerMessage>> = BTreeMap::new();
    let mut discarded = 0u64;
    let mut comm_secs = 0.0;
    let elapsed_ms = || {
        if sh.opts.wall_clock {
            sh.start.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        }
    };

    while w.step < plan.total_steps {
        match w.advance(next_ckpt.min(plan.total_steps), Some(sh.stop)) {
            Halt::Stopped => break,
            Halt::Limit => {}
            Halt::Communicate => {
                let t0 = Instant::now();
                w.check_finite()?;
                let round = w.rounds;
                let mine = w.message();
                for (_, tx) in peers {
                    // A peer that already left only means fewer messages.
                    let _ = tx.send(Envelope {
                        round,
                        msg: mine.clone(),
                    });
                }
                let Some(mut got) = collect(sh, index, round, inbox, &mut buffer, &mut discarded)? else {
                    break;
                };
                got.push(mine);
                got.sort_by_key(|m| m.worker_index);
                let participants: Vec<usize> = got.iter().map(|m| m.worker_index).collect();
                let energies: Vec<f64> = got.iter().map(|m| m.loss_energy).collect();
                let Aggregation::Weighted(rule) = &sh.scheme.aggregation else {
                    unreachable!("checked before launch")
                };
                let theta = rule.weights(&energies)?;
                let params: Vec<&[f64]> = got.iter().map(|m| &m.params[..]).collect();
                let consensus = weighted_sum(&params, theta.as_slice());
                let scores = if plan.order == super::OrderPolicy::Scored {
                    judge_all(&energies)
                } else {
                    vec![0.0; got.len()]
                };
                let me = participants.iter().position(|&j| j == index).expect("own message");
                let blend = if plan.beta > 0.0 {
                    Blend::Toward(&consensus)
                } else {
                    Blend::Keep
                };
                w.complete_round(blend, scores[me]);
                comm_secs += t0.elapsed().as_secs_f64();
                let record = RoundRecord {
                    round: w.rounds,
                    step: w.step,
                    worker: Some(index),
                    participants,
                    energies,
                    weights: theta,
                    scores,
                    diameter: if sh.opts.diagnostics { diameter(&params) } else { 0.0 },
                    consensus: if sh.opts.diagnostics {
                        consensus.clone()
                    } else {
                        ParamVector::default()
                    },
                    estimation_errors: Vec::new(),
                    selected: None,
                };
                let _ = events.send(Event::Round {
                    record,
                    consumed: got.len(),
                });
            }
        }
        if w.step == next_ckpt || w.step == plan.total_steps {
            w.check_finite()?;
            let _ = events.send(Event::Snapshot {
                worker: index,
                step: w.step,
                params: w.x.clone(),
                wall_ms: elapsed_ms(),
            });
            if w.step == next_ckpt {
                next_ckpt += every;
            }
        }
    }
    let _ = events.send(Event::Done {
        worker: index,
        params: w.x.clone(),
        rounds: w.rounds,
        discarded,
        comm_secs,
    });
    Ok(())
}

/// Waits for `p − 1` peer messages of `round`. `None` when the run was
/// stopped while waiting.
fn collect(
    sh: &Shared<'_>,
    index: usize,
    round: u64,
    inbox: &Receiver<Envelope>,
    buffer: &mut BTreeMap<u64, Vec<WorkerMessage>>,
    discarded: &mut u64,
) -> Result<Option<Vec<WorkerMessage>>> {
    let needed = sh.p - 1;
    let deadline = Instant::now() + sh.opts.round_timeout;
    loop {
        let have = buffer.get(&round).map_or(0, Vec::len);
        if have >= needed {
            let mut got = buffer.remove(&round).unwrap_or_default();
            *discarded += (got.len() - needed) as u64;
            got.truncate(needed);
            return Ok(Some(got));
        }
        if sh.stop.load(Ordering::Relaxed) {
            return Ok(None);
        }
        match inbox.recv_timeout(POLL) {
            Ok(env) if env.round < round => *discarded += 1,
            Ok(env) => buffer.entry(env.round).or_default().push(env.msg),
            Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => {
                if Instant::now() >= deadline {
                    return Err(Error::Deadlock {
                        worker: index,
                        round,
                        received: have,
                        needed,
                    });
                }
                if matches!(inbox.try_recv(), Err(mpsc::TryRecvError::Disconnected)) {
                    std::thread::sleep(POLL);
                }
            }
        }
    }
}
