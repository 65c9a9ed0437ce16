//! Post-processing of runs: rate fits, time tables, CSV and manifests.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::algorithms::{IterationRecord, RunConfig, RunResult, Termination};
use crate::engine::{utilization, CommLedger, WorkerState};
use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 9] = [
    "t",
    "objective",
    "f_value",
    "pg_norm",
    "delta_norm",
    "uploads",
    "downloads",
    "rounds",
    "virtual_time",
];

const MIN_LINEAR_POINTS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateKind {
    Linear,
    Sublinear,
}

/// `T(eps)` for one grid value; `None` when never reached.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub eps: f64,
    pub first_below: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFitReport {
    pub kind: RateKind,
    /// Fitted per-iteration contraction (linear fits).
    pub eta_hat: Option<f64>,
    /// `max_eps T(eps) * eps` over the reached grid values (sublinear fits).
    pub c_hat: Option<f64>,
    pub r_squared: f64,
    /// Inclusive index range used.
    pub window: (usize, usize),
    pub grid: Vec<GridPoint>,
    /// False when some grid value was never reached.
    pub complete: bool,
}

/// Least-squares fit of `log(F_t - f_star)` against `t`.
///
/// The window starts at index 0 and ends before the first gap at or below
/// `max(floor, 100 * eps * |f_star|)`.
pub fn fit_linear_rate(f_values: &[f64], f_star: f64, floor: f64) -> Result<RateFitReport> {
    let cutoff = floor.max(100.0 * f64::EPSILON * f_star.abs());
    let usable = f_values
        .iter()
        .take_while(|&&f| f - f_star > cutoff && (f - f_star).is_finite())
        .count();
    if usable < MIN_LINEAR_POINTS {
        return Err(Error::InsufficientData(format!(
            "{usable} points above the gap floor {cutoff:.3e}, need {MIN_LINEAR_POINTS}"
        )));
    }
    let ys: Vec<f64> = f_values[..usable].iter().map(|f| (f - f_star).ln()).collect();
    let n = usable as f64;
    let mean_x = (n - 1.0) / 2.0;
    let mean_y = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - mean_x;
        let dy = y - mean_y;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) };
    Ok(RateFitReport {
        kind: RateKind::Linear,
        eta_hat: Some((-slope).exp()),
        c_hat: None,
        r_squared,
        window: (0, usable - 1),
        grid: Vec::new(),
        complete: true,
    })
}

/// `F(x^{t+1}, x^t)` of every record.
pub fn f_series(records: &[IterationRecord]) -> Vec<f64> {
    records.iter().map(|r| r.f_value).collect()
}

/// `T(eps)` = first index with `pg_norm < eps`; `C_hat = max T(eps) * eps`
/// over the grid values that were reached.
pub fn fit_sublinear_bound(pg_norms: &[f64], eps_grid: &[f64]) -> RateFitReport {
    let grid: Vec<GridPoint> = eps_grid
        .iter()
        .map(|&eps| GridPoint {
            eps,
            first_below: pg_norms.iter().position(|&g| g < eps),
        })
        .collect();
    let c_hat = grid
        .iter()
        .filter_map(|g| g.first_below.map(|t| t as f64 * g.eps))
        .reduce(f64::max);
    let last = grid.iter().filter_map(|g| g.first_below).max().unwrap_or(0);
    RateFitReport {
        kind: RateKind::Sublinear,
        eta_hat: None,
        c_hat,
        r_squared: f64::NAN,
        window: (0, last),
        complete: grid.iter().all(|g| g.first_below.is_some()),
        grid,
    }
}

/// Virtual compute and idle seconds per remote worker.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TimeTable {
    pub compute_time: Vec<f64>,
    pub idle_time: Vec<f64>,
    pub utilization: Vec<f64>,
}

impl TimeTable {
    pub fn from_workers(states: &[WorkerState]) -> Self {
        Self {
            compute_time: states.iter().map(|s| s.compute_time).collect(),
            idle_time: states.iter().map(|s| s.idle_time).collect(),
            utilization: states.iter().map(WorkerState::utilization).collect(),
        }
    }

    /// Mean of the per-worker utilizations (1 with no remote workers).
    pub fn mean_utilization(&self) -> f64 {
        if self.utilization.is_empty() {
            1.0
        } else {
            self.utilization.iter().sum::<f64>() / self.utilization.len() as f64
        }
    }

    /// Pooled `sum compute / sum (compute + idle)`.
    pub fn pooled_utilization(&self) -> f64 {
        utilization(self.compute_time.iter().sum(), self.idle_time.iter().sum())
    }
}

/// One parsed CSV row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub t: usize,
    pub objective: f64,
    pub f_value: f64,
    pub pg_norm: f64,
    pub delta_norm: f64,
    pub uploads: u64,
    pub downloads: u64,
    pub rounds: u64,
    pub virtual_time: f64,
}

impl From<&IterationRecord> for CsvRow {
    fn from(r: &IterationRecord) -> Self {
        Self {
            t: r.t,
            objective: r.objective,
            f_value: r.f_value,
            pg_norm: r.pg_norm,
            delta_norm: r.delta_norm,
            uploads: r.uploads,
            downloads: r.downloads,
            rounds: r.rounds,
            virtual_time: r.virtual_time,
        }
    }
}

fn float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn emit_csv(records: &[IterationRecord], path: &Path) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut out = csv::Writer::from_path(path).map_err(io)?;
    out.write_record(CSV_HEADER).map_err(io)?;
    for r in records {
        out.write_record([
            r.t.to_string(),
            float(r.objective),
            float(r.f_value),
            float(r.pg_norm),
            float(r.delta_norm),
            r.uploads.to_string(),
            r.downloads.to_string(),
            r.rounds.to_string(),
            float(r.virtual_time),
        ])
        .map_err(io)?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let format = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| format(e.to_string()))?;
    let header = reader.headers().map_err(|e| format(e.to_string()))?;
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(format(format!("unexpected header {header:?}")));
    }
    reader
        .deserialize()
        .map(|row| row.map_err(|e| format(e.to_string())))
        .collect()
}

/// Structured summary written next to each CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub config: RunConfig,
    pub rounds: usize,
    pub termination: Termination,
    pub final_objective: f64,
    pub final_pg_norm: f64,
    pub ledger: CommLedger,
    pub rho_valid: bool,
    pub mean_utilization: f64,
    pub time_table: TimeTable,
    pub wall_time_secs: f64,
}

impl RunManifest {
    pub fn new(config: &RunConfig, result: &RunResult) -> Self {
        Self {
            name: result.name.clone(),
            config: config.clone(),
            rounds: result.rounds(),
            termination: result.termination,
            final_objective: result.final_objective,
            final_pg_norm: result.final_pg_norm,
            ledger: result.ledger,
            rho_valid: if config.inexact.is_active() {
                result.rho_report.inexact_pass
            } else {
                result.rho_report.pass
            },
            mean_utilization: result.time_table.mean_utilization(),
            time_table: result.time_table.clone(),
            wall_time_secs: result.wall_time_secs,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut out, self).map_err(|e| Error::io(path, e.into()))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }
}
