use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use wasgd::data::synth_blobs;
use wasgd::models::{Model, SoftmaxRegression};
use wasgd::par::Execution;
use wasgd::protocol::{run_wasgd_plus_sync, CommConfig, RunOptions};
use wasgd::variance::{simulate_variance, MonteCarloOptions, VarianceSpec};
use wasgd::weighting::full_losses;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn engine(c: &mut Criterion) {
    let data = synth_blobs(10, 100, 20, 1.0, 7).unwrap();
    let model = SoftmaxRegression::new(20, 10);
    let cfg = CommConfig {
        p: 8,
        tau: 20,
        m: 10,
        c: 2,
        eta: 0.05,
        ..Default::default()
    };
    let mut g = c.benchmark_group("wasgd_plus_epoch");
    g.sample_size(10);
    for (name, execution) in MODES {
        let opts = RunOptions {
            execution,
            ..Default::default()
        };
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run_wasgd_plus_sync(&model, &data, &cfg, &opts).unwrap())
        });
    }
    g.finish();
}

fn monte_carlo(c: &mut Criterion) {
    let spec = VarianceSpec::equal(1.0, 0.1, 0.5, 1.0, 0.5, 4).unwrap();
    let mut g = c.benchmark_group("variance_replicas");
    g.sample_size(10);
    for (name, execution) in MODES {
        let opts = MonteCarloOptions {
            steps: 20_000,
            replicas: 32,
            execution,
            ..Default::default()
        };
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| simulate_variance(&spec, &opts).unwrap())
        });
    }
    g.finish();
}

fn losses(c: &mut Criterion) {
    let data = synth_blobs(10, 200, 20, 1.0, 7).unwrap();
    let model = SoftmaxRegression::new(20, 10);
    let xs: Vec<_> = (0..8).map(|s| model.init_params(s)).collect();
    let mut g = c.benchmark_group("full_losses");
    for (name, execution) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| full_losses(&model, &xs, data.train(), execution))
        });
    }
    g.finish();
}

criterion_group!(benches, engine, monte_carlo, losses);
criterion_main!(benches);
