//! Acceptance gate. Prints one PASS/FAIL line per criterion and fails if any
//! criterion fails. Run with `cargo test -p wasgd --test acceptance`.

mod common;

use std::time::{Duration, Instant};

use rand::Rng;
use wasgd::data::{synth_blobs, synth_two_level, DatasetHandle};
use wasgd::experiment::{sign_test_negative, Metric};
use wasgd::models::{ConstantFit, Model, NoisyQuadratic, NoisyQuadraticSpec, ParamVector};
use wasgd::protocol::{
    easgd_condition, easgd_sufficient_condition, run_easgd, run_wasgd_plus_async, run_wasgd_plus_sync, sequential_sgd,
    CommConfig, EngineKind, OrderPolicy, RunOptions,
};
use wasgd::rng::{derive_seed, SplitMix64};
use wasgd::variance::{
    asymptotic_variance, contraction_rate, minibatch_equivalence, simulate_variance, weighting_tendency_sweep,
    MonteCarloOptions, TendencyAxis, VarianceSpec,
};
use wasgd::weighting::{estimation_error, WeightRule, WeightVector};

use common::*;

struct Check {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Check {
    Check {
        pass,
        detail: detail.into(),
    }
}

fn criterion(n: usize, name: &str, budget: Duration, f: impl FnOnce() -> Check) -> bool {
    let t = Instant::now();
    let c = f();
    let elapsed = t.elapsed();
    let in_time = elapsed <= budget;
    let pass = c.pass && in_time;
    println!(
        "{} criterion {n:>2}: {name}: {}; {:.1}s of {}s{}",
        if pass { "PASS" } else { "FAIL" },
        c.detail,
        elapsed.as_secs_f64(),
        budget.as_secs(),
        if in_time { "" } else { " (over time budget)" }
    );
    pass
}

fn stationary_variance() -> Check {
    let mut specs = Vec::new();
    for zeta in [0.1, 0.5, 1.0] {
        specs.push(VarianceSpec::equal(1.0, 0.1, 0.5, 1.0, zeta, 4).unwrap());
    }
    specs.push(
        VarianceSpec::new(
            1.0,
            0.1,
            0.5,
            1.0,
            0.5,
            WeightVector::new(vec![0.4, 0.3, 0.2, 0.1]).unwrap(),
        )
        .unwrap(),
    );
    specs.push(VarianceSpec::equal(2.0, 0.05, 1.0, 0.5, 0.2, 8).unwrap());

    let opts = MonteCarloOptions {
        steps: 200_000,
        replicas: 200,
        burn_in: 0.5,
        seed: 1,
        ..Default::default()
    };
    let mut worst_mc: f64 = 0.0;
    for s in &specs {
        match simulate_variance(s, &opts) {
            Ok(r) => worst_mc = worst_mc.max(r.relative_error),
            Err(e) => return check(false, format!("simulation failed: {e}")),
        }
    }

    let t = Instant::now();
    let mut rng = SplitMix64::new(2024);
    let mut worst_lin: f64 = 0.0;
    for _ in 0..100 {
        let s = random_spec(&mut rng);
        let q = asymptotic_variance(&s).unwrap();
        let oracle = stationary_by_linear_solve(&s);
        worst_lin = worst_lin.max((q - oracle).abs() / oracle.abs().max(1.0));
    }
    let lin_time = t.elapsed();
    check(
        worst_mc <= 0.05 && worst_lin <= 1e-10 && lin_time < Duration::from_secs(1),
        format!(
            "{} specs, worst Monte-Carlo relative error {worst_mc:.4} (<= 0.05); closed form vs linear solve worst {worst_lin:.1e} on 100 specs in {:.3}s",
            specs.len(),
            lin_time.as_secs_f64()
        ),
    )
}

fn minibatch_equivalence_check() -> Check {
    let (data, model) = toy_classifier();
    match minibatch_equivalence(&model, &data, 4, 0.1, 10_000, 5) {
        Ok(dev) => check(
            dev <= 1e-10,
            format!("max deviation {dev:.2e} over 10^4 steps (<= 1e-10)"),
        ),
        Err(e) => check(false, e.to_string()),
    }
}

fn boltzmann_limits() -> Check {
    let mut rng = SplitMix64::new(11);
    let mut worst_equal: f64 = 0.0;
    let mut worst_best: f64 = 1.0;
    for _ in 0..10_000 {
        let p = rng.random_range(2..=16);
        let mut h: Vec<f64> = (0..p).map(|_| rng.random_range(0.0..10.0)).collect();
        let theta = WeightRule::Boltzmann { a_tilde: 0.0 }.weights(&h).unwrap();
        for t in theta.as_slice() {
            worst_equal = worst_equal.max((t - 1.0 / p as f64).abs());
        }
        // Unique minimum, normalized gap at least 1e-3.
        let best = rng.random_range(0..p);
        loop {
            let floor = h
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != best)
                .map(|(_, v)| *v)
                .fold(f64::INFINITY, f64::min);
            h[best] = floor * rng.random::<f64>();
            let total: f64 = h.iter().sum();
            if (floor - h[best]) / total >= 1e-3 {
                break;
            }
            h.iter_mut().for_each(|v| *v = rng.random_range(0.0..10.0));
        }
        let theta = WeightRule::Boltzmann { a_tilde: 1e6 }.weights(&h).unwrap();
        worst_best = worst_best.min(theta.as_slice()[best]);
    }
    check(
        worst_equal <= 1e-12 && worst_best >= 1.0 - 1e-9,
        format!(
            "a=0 worst |theta-1/p| {worst_equal:.1e}; a=1e6 smallest winner weight 1-{:.1e}",
            1.0 - worst_best
        ),
    )
}

fn estimation_bound() -> Check {
    let mut rng = SplitMix64::new(3);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..100_000 {
        let p = rng.random_range(1..=12);
        let e = estimation_error(&random_simplex(&mut rng, p), &random_simplex(&mut rng, p)).unwrap();
        lo = lo.min(e);
        hi = hi.max(e);
    }
    let (data, model) = desk_classifier();
    let median_error = |m: usize| {
        let mut per_run: Vec<f64> = (0..20)
            .map(|seed| {
                let cfg = CommConfig {
                    p: 4,
                    tau: 200,
                    m,
                    c: 2,
                    eta: 0.05,
                    seed,
                    ..Default::default()
                };
                let opts = RunOptions {
                    diagnostics: true,
                    estimation_probes: vec![m],
                    checkpoint_every: u64::MAX,
                    ..Default::default()
                };
                let log = run_wasgd_plus_sync(&model, &data, &cfg, &opts).unwrap();
                log.rounds.iter().map(|r| r.estimation_errors[0]).sum::<f64>() / log.rounds.len() as f64
            })
            .collect();
        per_run.sort_by(f64::total_cmp);
        (per_run[9] + per_run[10]) / 2.0
    };
    let (e10, e100) = (median_error(10), median_error(100));
    check(
        lo >= 0.0 && hi <= 2.0 && e100 < e10,
        format!("10^5 pairs in [{lo:.3e}, {hi:.17}]; median live error m=100 {e100:.4} vs m=10 {e10:.4}"),
    )
}

fn contraction() -> Check {
    let mut details = Vec::new();
    let mut pass = true;
    for eta in [0.01, 0.1] {
        for tau in [10, 100] {
            let rounds = 10;
            let noise = NoisyQuadraticSpec::new(1.0, 0.0, 0.0).unwrap();
            let data = DatasetHandle::new(noise.noise_samples(tau * rounds, 0), 0).unwrap();
            let model = NoisyQuadratic {
                c: 1.0,
                dim: 1,
                init: 0.0,
            };
            let cfg = CommConfig {
                p: 4,
                tau,
                m: 10,
                c: 1,
                beta: 1.0,
                eta,
                ..Default::default()
            };
            let v = |xs: [f64; 4]| xs.iter().map(|x| ParamVector::new(vec![*x])).collect::<Vec<_>>();
            let rep = contraction_rate(
                &model,
                &data,
                &cfg,
                v([1.0, 2.0, -3.0, 0.5]),
                v([-1.0, 4.0, 2.0, 0.0]),
                &RunOptions::default(),
            )
            .unwrap();
            let expected = (1.0 - eta).powi(tau as i32);
            let fitted = rep.fitted_ratio.unwrap_or(f64::NAN);
            let worst = rep
                .ratios
                .iter()
                .map(|r| (r / expected - 1.0).abs())
                .fold(0.0, f64::max);
            let fit_err = (fitted / expected - 1.0).abs();
            let r2 = rep.r_squared.unwrap_or(0.0);
            pass &= fit_err <= 0.02 && r2 > 0.99;
            details.push(format!(
                "eta={eta} tau={tau}: fit {fitted:.4e} vs {expected:.4e} ({:.2}%), R2 {r2:.6}, worst single round {:.2}%",
                fit_err * 100.0,
                worst * 100.0
            ));
        }
    }
    check(pass, details.join("; "))
}

fn degenerate_limits() -> Check {
    let (data, model) = toy_classifier();
    let opts = RunOptions {
        epochs: 3,
        order: Some(OrderPolicy::Shuffled),
        checkpoint_every: 50,
        ..Default::default()
    };
    let independent = |cfg: &CommConfig| -> bool {
        let log = run_wasgd_plus_sync(&model, &data, cfg, &opts).unwrap();
        (0..cfg.p).all(|i| {
            let run = sequential_sgd(
                &model,
                data.train(),
                model.init_params(cfg.seed),
                cfg.eta,
                opts.epochs,
                cfg.n,
                derive_seed(cfg.seed, i as u64),
                u64::MAX,
            );
            run.params == log.final_params[i]
        })
    };
    let beta0 = CommConfig {
        p: 4,
        tau: 10,
        m: 10,
        c: 1,
        n: 3,
        beta: 0.0,
        eta: 0.1,
        seed: 8,
        ..Default::default()
    };
    let single = CommConfig {
        p: 1,
        beta: 0.9,
        ..beta0.clone()
    };
    let scored = RunOptions {
        order: None,
        ..opts.clone()
    };
    let single_scored = {
        let log = run_wasgd_plus_sync(&model, &data, &single, &scored).unwrap();
        let run = sequential_sgd(
            &model,
            data.train(),
            model.init_params(8),
            0.1,
            3,
            3,
            derive_seed(8, 0),
            u64::MAX,
        );
        run.params == log.final_params[0]
    };
    let (a, b) = (independent(&beta0), independent(&single));
    check(
        a && b && single_scored,
        format!("beta=0 vs 4 sequential runs: {a}; p=1 vs sequential: {b}; p=1 with retained orders: {single_scored}"),
    )
}

fn order_effect() -> Check {
    let (data, model) = desk_classifier();
    let mut votes = 0;
    let mut rows = Vec::new();
    for seed in 0..5 {
        let losses: Vec<f64> = [1, 10, 100, 1000]
            .iter()
            .map(|&delta| {
                let cfg = CommConfig { seed, ..desk_config() };
                let opts = RunOptions {
                    epochs: 2,
                    order: Some(OrderPolicy::Grouped { delta }),
                    checkpoint_every: 500,
                    ..Default::default()
                };
                run_wasgd_plus_sync(&model, &data, &cfg, &opts)
                    .unwrap()
                    .final_train_loss()
            })
            .collect();
        if losses[0] <= losses[1] && losses[1] < losses[2] && losses[2] < losses[3] {
            votes += 1;
        }
        rows.push(format!(
            "[{:.4} {:.4} {:.4} {:.4}]",
            losses[0], losses[1], losses[2], losses[3]
        ));
    }

    // Twelve samples, six at a = 0 and six at b = 0.04, one pass from 0.06.
    let (a, b) = (0.0, 0.04);
    let twelve = synth_two_level(12, a, b).unwrap();
    let grouped: Vec<usize> = (6..12).chain(0..6).collect();
    let alternating: Vec<usize> = (0..6).flat_map(|k| [6 + k, k]).collect();
    let end = |order: Vec<usize>| {
        let cfg = CommConfig {
            p: 1,
            tau: 12,
            m: 12,
            c: 1,
            eta: 0.5,
            ..Default::default()
        };
        let opts = RunOptions {
            order: Some(OrderPolicy::Explicit(vec![order])),
            ..Default::default()
        };
        run_wasgd_plus_sync(&ConstantFit { init: 0.06 }, &twelve, &cfg, &opts)
            .unwrap()
            .final_params[0][0]
    };
    let (g, alt) = (end(grouped), end(alternating));
    let example = (g - a).abs() <= 1e-3 && (alt - (a + b) / 2.0).abs() <= 1e-2;
    check(
        votes >= 3 && example,
        format!(
            "{votes}/5 seeds ordered, losses by delta 1/10/100/1000 {}; 12-sample: grouped ends {g:.2e} from a, alternating {:.2e} from (a+b)/2",
            rows.join(" "),
            (alt - (a + b) / 2.0).abs()
        ),
    )
}

fn sweep_direction() -> Check {
    let (data, model) = desk_classifier();
    let opts = RunOptions {
        checkpoint_every: 100,
        ..Default::default()
    };
    let run = |axis: TendencyAxis, v: f64| {
        let s =
            weighting_tendency_sweep(&model, &data, &desk_config(), axis, &[v], 5, Metric::TrainLoss, &opts).unwrap();
        s.rows[0].comparison.clone()
    };
    let t = run(TendencyAxis::Temperature, 1e-3);
    let b = run(TendencyAxis::Acceptance, 0.1);
    let (pt, pb) = (sign_test_negative(&t.per_replica), sign_test_negative(&b.per_replica));
    check(
        t.mean_difference < 0.0 && b.mean_difference < 0.0 && pt < 0.1 && pb < 0.1,
        format!(
            "T=1e-3 vs equal weights {:.4} (sign test p={pt:.3}); beta=0.1 vs beta=1 {:.4} (p={pb:.3})",
            t.mean_difference, b.mean_difference
        ),
    )
}

fn easgd_weights() -> Check {
    let mut violations = 0;
    let mut checked = 0;
    for p in 1..=64usize {
        for k in 0..=4000 {
            let alpha = k as f64 / 4000.0;
            if easgd_sufficient_condition(p, alpha) {
                checked += 1;
                if !easgd_condition(p, alpha) {
                    violations += 1;
                }
            }
        }
    }

    // One round with τ = 1, two workers at 1 and 3, sample target 0.
    let data = synth_two_level(2, 0.0, 0.0).unwrap();
    let (eta, alpha) = (0.5, 0.1);
    let cfg = CommConfig {
        p: 2,
        tau: 1,
        m: 1,
        c: 1,
        eta,
        alpha: Some(alpha),
        ..Default::default()
    };
    let opts = RunOptions {
        inits: Some(vec![ParamVector::new(vec![1.0]), ParamVector::new(vec![3.0])]),
        order: Some(OrderPolicy::Identity),
        ..Default::default()
    };
    let log = run_easgd(&ConstantFit { init: 0.0 }, &data, &cfg, &opts).unwrap();
    // After the first of two steps.
    let center0 = 2.0;
    let x = [1.0f64, 3.0];
    let worker = |xi: f64| xi - eta * (xi - 0.0) - alpha * (xi - center0);
    let center1 = (1.0 - 2.0 * alpha) * center0 + alpha * (x[0] + x[1]);
    let x1 = [worker(x[0]), worker(x[1])];
    // Second step, same equations.
    let worker2 = |xi: f64| xi - eta * (xi - 0.0) - alpha * (xi - center1);
    let center2 = (1.0 - 2.0 * alpha) * center1 + alpha * (x1[0] + x1[1]);
    let x2 = [worker2(x1[0]), worker2(x1[1])];
    let err = (log.final_params[0][0] - x2[0])
        .abs()
        .max((log.final_params[1][0] - x2[1]).abs())
        .max((log.center.as_ref().unwrap()[0] - center2).abs());
    check(
        violations == 0 && err <= 1e-12,
        format!("{checked} grid points meet the sufficient condition, {violations} violate the condition; hand trace error {err:.1e}"),
    )
}

fn async_liveness() -> Check {
    let data = synth_blobs(3, 40, 4, 1.0, 2).unwrap();
    let model = wasgd::models::SoftmaxRegression::new(4, 3);
    let d = Duration::from_micros(500);
    let cfg = CommConfig {
        p: 4,
        tau: 10,
        m: 4,
        c: 2,
        eta: 0.1,
        seed: 3,
        ..Default::default()
    };
    let base = RunOptions {
        epochs: 2,
        checkpoint_every: 60,
        wall_clock: true,
        ..Default::default()
    };

    let sync_opts = RunOptions {
        engine: EngineKind::Threaded,
        step_delays: vec![d; 4],
        ..base.clone()
    };
    let t = Instant::now();
    let sync = match run_wasgd_plus_sync(&model, &data, &cfg, &sync_opts) {
        Ok(l) => l,
        Err(e) => return check(false, format!("sync run failed: {e}")),
    };
    let sync_wall = t.elapsed();

    let async_cfg = CommConfig { b: 2, ..cfg };
    let async_opts = RunOptions {
        step_delays: vec![d, d, d, d, d * 10, d * 10],
        ..base
    };
    let t = Instant::now();
    let run = match run_wasgd_plus_async(&model, &data, &async_cfg, &async_opts) {
        Ok(l) => l,
        Err(e) => return check(false, format!("async run failed: {e}")),
    };
    let async_wall = t.elapsed();
    let exact = run.stats.messages_consumed.iter().all(|&k| k == 4);
    let ratio = async_wall.as_secs_f64() / sync_wall.as_secs_f64();
    check(
        run.stats.rounds == sync.stats.rounds && ratio <= 1.5 && exact,
        format!(
            "async rounds {} vs sync {}; wall {:.0} ms vs {:.0} ms (x{ratio:.2}); every aggregation used exactly p messages: {exact}",
            run.stats.rounds,
            sync.stats.rounds,
            async_wall.as_secs_f64() * 1e3,
            sync_wall.as_secs_f64() * 1e3
        ),
    )
}

fn main() {
    let s = Duration::from_secs;
    let results = [
        criterion(
            1,
            "stationary variance, Monte Carlo and linear solve",
            s(300),
            stationary_variance,
        ),
        criterion(
            2,
            "equal weights with per-step exchange is mini-batch descent",
            s(30),
            minibatch_equivalence_check,
        ),
        criterion(3, "Boltzmann weight limits", s(10), boltzmann_limits),
        criterion(4, "estimation error bound and m=100 vs m=10", s(300), estimation_bound),
        criterion(5, "contraction ratio (1-eta c)^tau", s(10), contraction),
        criterion(
            6,
            "beta=0 and p=1 reduce to sequential SGD bit for bit",
            s(30),
            degenerate_limits,
        ),
        criterion(7, "sample order effect", s(900), order_effect),
        criterion(8, "T and beta sweep direction", s(1200), sweep_direction),
        criterion(9, "EASGD moving-rate condition and update", s(1), easgd_weights),
        criterion(10, "asynchronous liveness with backups", s(300), async_liveness),
    ];
    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
