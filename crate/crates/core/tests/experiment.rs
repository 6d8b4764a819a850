use std::path::Path;

use proptest::prelude::*;
use wasgd::experiment::{
    compare_runs, log_from_rows, run_experiment, sweep, DatasetKind, Metric, ModelId, OrderId, ProtocolId, RunConfig,
    SweepParam,
};
use wasgd::protocol::{read_csv, Checkpoint, TrajectoryLog};
use wasgd::Error;

fn small() -> RunConfig {
    RunConfig {
        classes: 3,
        per_class: 20,
        features: 4,
        hold_out: 12,
        p: 3,
        tau: 8,
        m: 4,
        c: 2,
        eta: 0.1,
        checkpoint_every: 16,
        ..Default::default()
    }
}

fn write_idx(dir: &Path, images: &[[u8; 4]], labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
    let mut img = vec![0, 0, 8, 3];
    img.extend((images.len() as u32).to_be_bytes());
    img.extend(2u32.to_be_bytes());
    img.extend(2u32.to_be_bytes());
    for im in images {
        img.extend(im);
    }
    let mut lab = vec![0, 0, 8, 1];
    lab.extend((labels.len() as u32).to_be_bytes());
    lab.extend(labels);
    let (pi, pl) = (dir.join("img.idx"), dir.join("lab.idx"));
    std::fs::write(&pi, img).unwrap();
    std::fs::write(&pl, lab).unwrap();
    (pi, pl)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn saved_config_reruns_to_identical_csv(
        protocol in prop::sample::select(vec![ProtocolId::WasgdPlus, ProtocolId::Wasgd, ProtocolId::Mmwu, ProtocolId::Easgd, ProtocolId::Simuparallel]),
        seed in 0u64..1000,
        beta in 0.0f64..=1.0,
        a_tilde in 0.0f64..4.0,
        order in prop::sample::select(vec![OrderId::Default, OrderId::Shuffled, OrderId::Grouped]),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("a.csv");
        let cfg = RunConfig { protocol, seed, beta, a_tilde, order, delta: 3, output: Some(out.clone()), ..small() };
        run_experiment(&cfg).unwrap();
        let cfg_path = dir.path().join("run.toml");
        std::fs::write(&cfg_path, cfg.to_toml().unwrap()).unwrap();
        let reloaded = RunConfig { output: Some(dir.path().join("b.csv")), ..RunConfig::load(&cfg_path).unwrap() };
        run_experiment(&reloaded).unwrap();
        prop_assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(dir.path().join("b.csv")).unwrap());
    }

    #[test]
    fn comparison_flips_sign_when_roles_swap(
        base in prop::collection::vec(prop::collection::vec(0.0f64..5.0, 4), 1..6),
        cand in prop::collection::vec(prop::collection::vec(0.0f64..5.0, 4), 1..6),
    ) {
        let logs = |v: &Vec<Vec<f64>>| -> Vec<TrajectoryLog> {
            v.iter().enumerate().map(|(r, losses)| {
                let rows: Vec<_> = losses.iter().enumerate().map(|(j, l)| wasgd::protocol::CsvRow {
                    protocol: "x".into(), p: 1, seed: r as u64, step: 10 * j as u64, wall_ms: 0.0,
                    train_loss: *l, train_err: None, test_loss: None, test_err: None,
                }).collect();
                log_from_rows(&rows).unwrap()
            }).collect()
        };
        let (b, c) = (logs(&base), logs(&cand));
        let fwd = compare_runs(&b, &c, Metric::TrainLoss).unwrap();
        let back = compare_runs(&c, &b, Metric::TrainLoss).unwrap();
        prop_assert!((fwd.mean_difference + back.mean_difference).abs() < 1e-12);
    }
}

#[test]
fn beta_sweep_writes_one_csv_per_value_and_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let res = sweep(&small(), SweepParam::Beta, &[0.1, 0.5], 2, Metric::TrainLoss).unwrap();
    res.save(dir.path()).unwrap();
    for name in [
        "baseline_r0.csv",
        "baseline_r1.csv",
        "beta_0.1_r0.csv",
        "beta_0.1_r1.csv",
        "beta_0.5_r0.csv",
        "beta_0.5_r1.csv",
    ] {
        let rows = read_csv(&dir.path().join(name)).unwrap();
        assert!(!rows.is_empty(), "{name}");
    }
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("param,value,replicas,mean_final_train_loss,mean_difference"));
    assert!(lines[1].starts_with("beta,0.1,2,"));
    for pt in &res.points {
        assert_eq!(pt.runs.iter().map(|l| l.seed).collect::<Vec<_>>(), vec![0, 1]);
        assert!(pt.comparison.is_some());
    }
}

#[test]
fn sweeps_without_a_baseline_only_run() {
    let res = sweep(&small(), SweepParam::Tau, &[4.0, 8.0], 1, Metric::TrainLoss).unwrap();
    assert!(res.baseline.is_empty());
    assert!(res.points.iter().all(|p| p.comparison.is_none()));
    assert!(matches!(
        sweep(&small(), SweepParam::Tau, &[100.0], 1, Metric::TrainLoss),
        Err(Error::Config(_))
    ));
}

#[test]
fn idx_files_feed_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let images: Vec<[u8; 4]> = (0..8)
        .map(|i| if i % 2 == 0 { [255, 0, 0, 10] } else { [0, 255, 10, 0] })
        .collect();
    let labels: Vec<u8> = (0..8).map(|i| (i % 2) as u8).collect();
    let (pi, pl) = write_idx(dir.path(), &images, &labels);
    let cfg = RunConfig {
        dataset: DatasetKind::Idx,
        images: Some(pi.clone()),
        labels: Some(pl.clone()),
        p: 2,
        tau: 4,
        m: 2,
        c: 1,
        eta: 0.5,
        epochs: 5,
        checkpoint_every: 8,
        ..Default::default()
    };
    let data = cfg.load_dataset().unwrap();
    assert_eq!((data.train().len(), data.feature_dim, data.num_classes), (8, 4, 10));
    let log = run_experiment(&cfg).unwrap();
    assert!(log.final_train_loss() < log.checkpoints[0].train_loss);

    // Corrupt label file.
    let mut bytes = std::fs::read(&pl).unwrap();
    bytes.truncate(10);
    std::fs::write(&pl, bytes).unwrap();
    assert!(matches!(run_experiment(&cfg), Err(Error::Format(_))));
    let missing = RunConfig { labels: None, ..cfg };
    assert!(matches!(run_experiment(&missing), Err(Error::Config(_))));
}

#[test]
fn classification_models_need_classes() {
    let cfg = RunConfig {
        dataset: DatasetKind::TwoLevel,
        model: ModelId::Softmax,
        ..small()
    };
    assert!(matches!(run_experiment(&cfg), Err(Error::Config(_))));
    let ok = RunConfig {
        dataset: DatasetKind::TwoLevel,
        model: ModelId::ConstantFit,
        hold_out: 0,
        tau: 4,
        m: 2,
        p: 2,
        ..small()
    };
    run_experiment(&ok).unwrap();
}

#[test]
fn csv_logs_read_back_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let mut paths = Vec::new();
    for seed in 0..2 {
        let path = dir.path().join(format!("r{seed}.csv"));
        run_experiment(&RunConfig {
            seed,
            output: Some(path.clone()),
            ..small()
        })
        .unwrap();
        paths.push(path);
    }
    let logs: Vec<TrajectoryLog> = paths
        .iter()
        .map(|p| log_from_rows(&read_csv(p).unwrap()).unwrap())
        .collect();
    let c = compare_runs(&logs, &logs, Metric::TestLoss).unwrap();
    assert!(c.mean_difference.abs() < 1e-15);

    let mut shifted = logs[0].clone();
    shifted.checkpoints.push(Checkpoint {
        step: 9999,
        ..shifted.checkpoints[0].clone()
    });
    assert!(matches!(
        compare_runs(&logs, &[shifted], Metric::TrainLoss),
        Err(Error::Alignment(_))
    ));
}
