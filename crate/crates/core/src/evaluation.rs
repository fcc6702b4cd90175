//! Bid/offer-spread satisfaction criterion and MAE reporting.
//!
//! A generated vol is satisfactory when it lies strictly within the
//! bucket threshold of the true vol. Buckets are half-open on the left:
//! term (0,3], (3,9], (9,inf) months and moneyness (0,0.9], (0.9,1.05], (1.05,inf).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::surface::SurfaceGrid;

/// Upper edges (inclusive) of the first two term buckets, in months.
pub const TERM_EDGES: [f64; 2] = [3.0, 9.0];
/// Upper edges (inclusive) of the first two moneyness buckets.
pub const MONEYNESS_EDGES: [f64; 2] = [0.9, 1.05];

/// Bid/offer thresholds in decimal vol units, rows = term bucket, cols = moneyness bucket.
pub const CANONICAL_THRESHOLDS: [[f64; 3]; 3] = [
    [0.0149, 0.0183, 0.0169],
    [0.0088, 0.0118, 0.0105],
    [0.0090, 0.0098, 0.0109],
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub values: [[f64; 3]; 3],
}

impl Default for ThresholdTable {
    fn default() -> Self {
        Self {
            values: CANONICAL_THRESHOLDS,
        }
    }
}

fn bucket(x: f64, edges: [f64; 2]) -> usize {
    if x <= edges[0] {
        0
    } else if x <= edges[1] {
        1
    } else {
        2
    }
}

impl ThresholdTable {
    pub fn canonical() -> Self {
        Self::default()
    }

    pub fn threshold_for(&self, tau_months: f64, moneyness: f64) -> f64 {
        self.values[bucket(tau_months, TERM_EDGES)][bucket(moneyness, MONEYNESS_EDGES)]
    }

    /// Reads a 3x3 table of decimals, one term bucket per line. Blank lines and `#` comments are skipped.
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect();
        if rows.len() != 3 {
            return Err(Error::Schema(format!("threshold table needs 3 rows, found {}", rows.len())));
        }
        let mut values = [[0.0; 3]; 3];
        for (i, line) in rows.iter().enumerate() {
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != 3 {
                return Err(Error::Schema(format!("threshold row {} needs 3 values", i + 1)));
            }
            for (j, cell) in cells.iter().enumerate() {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| Error::Schema(format!("threshold row {}, column {}: `{cell}`", i + 1, j + 1)))?;
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::Validation(format!("threshold {v} must be positive")));
                }
                values[i][j] = v;
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv_str(&std::fs::read_to_string(path)?)
    }

    /// Per-point thresholds over a surface's flattened grid.
    pub fn for_surface(&self, surface: &SurfaceGrid) -> Vec<f64> {
        surface.grid().points().map(|(t, m)| self.threshold_for(t, m)).collect()
    }
}

/// Satisfaction counts and MAE for one or many compared surfaces.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub points: usize,
    pub satisfactory: usize,
    pub rate: f64,
    pub mae: f64,
    pub mae_known: Option<f64>,
    pub mae_unknown: Option<f64>,
}

pub fn satisfaction(truth: &SurfaceGrid, pred: &SurfaceGrid, table: &ThresholdTable) -> Result<EvalReport> {
    truth.grid().ensure_matches(pred.grid())?;
    let mut tally = Tally::default();
    tally.add(truth, pred, table, None);
    Ok(tally.report())
}

/// Mean absolute error over mask-true points and over mask-false points; `None` for an empty side.
pub fn mae_split(truth: &SurfaceGrid, pred: &SurfaceGrid, mask: &[bool]) -> Result<(Option<f64>, Option<f64>)> {
    truth.grid().ensure_matches(pred.grid())?;
    if mask.len() != truth.as_slice().len() {
        return Err(Error::Dimension {
            context: "mask",
            expected: truth.as_slice().len(),
            actual: mask.len(),
        });
    }
    let (mut s_in, mut n_in, mut s_out, mut n_out) = (0.0, 0usize, 0.0, 0usize);
    for ((t, p), &m) in truth.as_slice().iter().zip(pred.as_slice()).zip(mask) {
        let e = (t - p).abs();
        if m {
            s_in += e;
            n_in += 1;
        } else {
            s_out += e;
            n_out += 1;
        }
    }
    let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
    Ok((mean(s_in, n_in), mean(s_out, n_out)))
}

/// Accumulates satisfaction and error sums across many surfaces.
#[derive(Debug, Clone, Default)]
pub struct Tally {
    points: usize,
    satisfactory: usize,
    abs_sum: f64,
    known: (f64, usize),
    unknown: (f64, usize),
}

impl Tally {
    /// Callers must have checked that the grids match.
    pub fn add(&mut self, truth: &SurfaceGrid, pred: &SurfaceGrid, table: &ThresholdTable, mask: Option<&[bool]>) {
        for (k, (t, m)) in truth.grid().points().enumerate() {
            let e = (truth.as_slice()[k] - pred.as_slice()[k]).abs();
            self.points += 1;
            self.abs_sum += e;
            if e < table.threshold_for(t, m) {
                self.satisfactory += 1;
            }
            if let Some(mask) = mask {
                let side = if mask[k] { &mut self.known } else { &mut self.unknown };
                side.0 += e;
                side.1 += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &Tally) {
        self.points += other.points;
        self.satisfactory += other.satisfactory;
        self.abs_sum += other.abs_sum;
        self.known.0 += other.known.0;
        self.known.1 += other.known.1;
        self.unknown.0 += other.unknown.0;
        self.unknown.1 += other.unknown.1;
    }

    pub fn report(&self) -> EvalReport {
        let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
        EvalReport {
            points: self.points,
            satisfactory: self.satisfactory,
            rate: if self.points == 0 {
                0.0
            } else {
                self.satisfactory as f64 / self.points as f64
            },
            mae: if self.points == 0 {
                0.0
            } else {
                self.abs_sum / self.points as f64
            },
            mae_known: mean(self.known),
            mae_unknown: mean(self.unknown),
        }
    }
}
