//! Run output: checkpoints, per-round diagnostics and counters, and the CSV
//! trajectory format.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ParamVector;
use crate::weighting::WeightVector;

pub const CSV_HEADER: [&str; 9] = [
    "protocol",
    "p",
    "seed",
    "step",
    "wall_ms",
    "train_loss",
    "train_err",
    "test_loss",
    "test_err",
];

/// Metrics at one step. Losses are per-sample means; for multi-worker
/// protocols they are averaged over the workers (or taken at the center
/// variable where a protocol has one).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub wall_ms: f64,
    pub train_loss: f64,
    pub train_err: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_err: Option<f64>,
}

/// One communication as seen by one worker (threaded engine) or by all
/// workers at once (simulation engine, `worker == None`).
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: u64,
    pub step: u64,
    pub worker: Option<usize>,
    /// Indices whose messages entered the aggregation, ascending.
    pub participants: Vec<usize>,
    pub energies: Vec<f64>,
    pub weights: WeightVector,
    pub scores: Vec<f64>,
    /// The combined parameters.
    pub consensus: ParamVector,
    /// Largest pairwise distance between participants right after blending.
    pub diameter: f64,
    /// Estimation error of the live weights followed by one entry per
    /// estimation probe, all against full-data weights.
    pub estimation_errors: Vec<f64>,
    /// Worker drawn by multiplicative-weights selection.
    pub selected: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunStats {
    /// Communication rounds completed (for the asynchronous variant: by the
    /// `p` fastest workers).
    pub rounds: u64,
    /// Steps per worker.
    pub steps: u64,
    /// Messages used by each aggregation, own message included; one entry
    /// per worker and round.
    pub messages_consumed: Vec<usize>,
    /// Messages that arrived for a round their receiver had already left.
    pub messages_discarded: u64,
    pub comm_ms: f64,
    pub wall_ms: f64,
    /// Loss evaluations beyond those that come with gradient steps.
    pub extra_loss_evals: u64,
    pub rounds_per_worker: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub protocol: String,
    pub p: usize,
    pub seed: u64,
    pub checkpoints: Vec<Checkpoint>,
    pub rounds: Vec<RoundRecord>,
    pub stats: RunStats,
    pub final_params: Vec<ParamVector>,
    /// EASGD center variable or the SimuParallel average.
    pub center: Option<ParamVector>,
}

/// One CSV line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub protocol: String,
    pub p: usize,
    pub seed: u64,
    pub step: u64,
    pub wall_ms: f64,
    pub train_loss: f64,
    pub train_err: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_err: Option<f64>,
}

impl TrajectoryLog {
    pub(crate) fn new(protocol: &str, p: usize, seed: u64) -> Self {
        Self {
            protocol: protocol.to_string(),
            p,
            seed,
            checkpoints: Vec::new(),
            rounds: Vec::new(),
            stats: RunStats::default(),
            final_params: Vec::new(),
            center: None,
        }
    }

    pub fn last(&self) -> Option<&Checkpoint> {
        self.checkpoints.last()
    }

    pub fn final_train_loss(&self) -> f64 {
        self.last().map_or(f64::NAN, |c| c.train_loss)
    }

    pub fn rows(&self) -> Vec<CsvRow> {
        self.checkpoints
            .iter()
            .map(|c| CsvRow {
                protocol: self.protocol.clone(),
                p: self.p,
                seed: self.seed,
                step: c.step,
                wall_ms: c.wall_ms,
                train_loss: c.train_loss,
                train_err: c.train_err,
                test_loss: c.test_loss,
                test_err: c.test_err,
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in self.rows() {
            w.serialize(row)?;
        }
        if self.checkpoints.is_empty() {
            w.write_record(CSV_HEADER)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::format(e.to_string()))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        self.write_csv(File::create(path)?)
    }
}

/// Reads a trajectory CSV written by [`TrajectoryLog::write_csv`].
pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(Error::format(format!(
            "{}: unexpected header {header:?}",
            path.display()
        )));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
