//! Surface completion: find the latent code whose decoded surface best matches
//! the observed points, then decode the full grid.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{Tally, ThresholdTable};
use crate::lbfgs::{minimize, LbfgsOptions};
use crate::surface::{format_vol, Corpus, GridSpec, SurfaceGrid};
use crate::vae::VaeModel;

/// Observed subset of a surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialSurface {
    grid: GridSpec,
    mask: Vec<bool>,
    /// Values at the true mask positions, in flat grid order.
    values: Vec<f64>,
}

impl PartialSurface {
    pub fn new(grid: GridSpec, mask: Vec<bool>, values: Vec<f64>) -> Result<Self> {
        if mask.len() != grid.len() {
            return Err(Error::Dimension {
                context: "mask",
                expected: grid.len(),
                actual: mask.len(),
            });
        }
        let known = mask.iter().filter(|m| **m).count();
        if values.len() != known {
            return Err(Error::Dimension {
                context: "known values",
                expected: known,
                actual: values.len(),
            });
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Validation(format!("known vols must be positive and finite, got {v}")));
        }
        Ok(Self { grid, mask, values })
    }

    /// Keeps the points of `surface` where `mask` is true.
    pub fn from_surface(surface: &SurfaceGrid, mask: &[bool]) -> Result<Self> {
        if mask.len() != surface.as_slice().len() {
            return Err(Error::Dimension {
                context: "mask",
                expected: surface.as_slice().len(),
                actual: mask.len(),
            });
        }
        let values = surface.as_slice().iter().zip(mask).filter(|(_, m)| **m).map(|(v, _)| *v).collect();
        Self::new(surface.grid().clone(), mask.to_vec(), values)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn known_count(&self) -> usize {
        self.values.len()
    }

    /// `(flat index, value)` of every known point.
    pub fn known(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, m)| **m)
            .map(|(i, _)| i)
            .zip(self.values.iter().copied())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationOptions {
    /// Number of starts: the origin plus `starts - 1` draws from the prior.
    pub starts: usize,
    pub seed: u64,
    /// Half-width of the quadratic zone of the smoothed absolute value.
    pub huber_delta: f64,
    pub lbfgs: LbfgsOptions,
}

impl Default for ExtrapolationOptions {
    fn default() -> Self {
        Self {
            starts: 8,
            seed: 0,
            huber_delta: 1e-6,
            lbfgs: LbfgsOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationResult {
    pub z_hat: Vec<f64>,
    /// Always `decode(z_hat)`.
    pub surface: SurfaceGrid,
    /// Smoothed objective at `z_hat`.
    pub objective: f64,
    /// Plain mean absolute error over the known points.
    pub mae_known: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Which start produced the result; 0 is the origin.
    pub best_start: usize,
}

fn huber(r: f64, delta: f64) -> (f64, f64) {
    let a = r.abs();
    if a <= delta {
        (r * r / (2.0 * delta), r / delta)
    } else {
        (a - delta / 2.0, r.signum())
    }
}

/// Smoothed known-point MAE and its gradient with respect to `z`.
pub fn objective(model: &VaeModel, partial: &PartialSurface, z: &[f64], delta: f64) -> Result<(f64, Vec<f64>)> {
    let k = partial.known_count() as f64;
    let mut value = 0.0;
    let (_, grad) = model.decode_with_grad(z, |vols| {
        let mut up = vec![0.0; vols.len()];
        for (i, v) in partial.known() {
            let (h, dh) = huber(vols[i] - v, delta);
            value += h / k;
            up[i] = dh / k;
        }
        up
    })?;
    Ok((value, grad))
}

/// The deterministic start points: the origin, then seeded standard-normal draws.
pub fn start_points(latent_dim: usize, opts: &ExtrapolationOptions) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    (0..opts.starts)
        .map(|i| {
            if i == 0 {
                vec![0.0; latent_dim]
            } else {
                (0..latent_dim).map(|_| rng.sample(StandardNormal)).collect()
            }
        })
        .collect()
}

/// Multi-start L-BFGS over the latent code; the lowest objective wins.
pub fn extrapolate(model: &VaeModel, partial: &PartialSurface, opts: &ExtrapolationOptions) -> Result<ExtrapolationResult> {
    model.grid().ensure_matches(partial.grid())?;
    if partial.known_count() == 0 {
        return Err(Error::Precondition("extrapolation needs at least one known point".into()));
    }
    if opts.starts == 0 {
        return Err(Error::Validation("extrapolation needs at least one start".into()));
    }
    if !(opts.huber_delta > 0.0) {
        return Err(Error::Validation("smoothing width must be positive".into()));
    }
    let mut best: Option<(usize, crate::lbfgs::LbfgsResult)> = None;
    for (i, z0) in start_points(model.latent_dim(), opts).iter().enumerate() {
        let f = |z: &[f64]| objective(model, partial, z, opts.huber_delta).unwrap_or((f64::NAN, vec![f64::NAN; z.len()]));
        let Some(r) = minimize(f, z0, &opts.lbfgs) else {
            continue;
        };
        if best.as_ref().is_none_or(|(_, b)| r.value < b.value) {
            best = Some((i, r));
        }
    }
    let (best_start, r) = best.ok_or(Error::NonFiniteObjective)?;
    let surface = model.decode(&r.x)?;
    let mae_known = partial.known().map(|(i, v)| (surface.as_slice()[i] - v).abs()).sum::<f64>() / partial.known_count() as f64;
    Ok(ExtrapolationResult {
        z_hat: r.x,
        surface,
        objective: r.value,
        mae_known,
        iterations: r.iterations,
        converged: r.converged,
        best_start,
    })
}

/// One row of the per-symbol extrapolation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationRow {
    pub symbol: String,
    pub surfaces: usize,
    pub mae_known: f64,
    pub mae_unknown: f64,
    pub satisfaction: f64,
    /// Runs that hit the iteration cap before meeting the gradient tolerance.
    pub unconverged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationTable {
    pub rows: Vec<ExtrapolationRow>,
    pub overall: ExtrapolationRow,
}

impl ExtrapolationTable {
    /// Mean over symbols of `|MAE known - MAE unknown|`.
    pub fn mean_gap(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| (r.mae_known - r.mae_unknown).abs()).sum::<f64>() / self.rows.len() as f64
    }
}

fn row(symbol: String, tally: &Tally, surfaces: usize, unconverged: usize) -> ExtrapolationRow {
    let rep = tally.report();
    ExtrapolationRow {
        symbol,
        surfaces,
        mae_known: rep.mae_known.unwrap_or(0.0),
        mae_unknown: rep.mae_unknown.unwrap_or(0.0),
        satisfaction: rep.rate,
        unconverged,
    }
}

/// Completes every test-split surface from its masked points and scores the
/// full prediction against the truth, aggregated per symbol.
pub fn evaluate_extrapolation(
    model: &VaeModel,
    corpus: &Corpus,
    mask: &[bool],
    table: &ThresholdTable,
    opts: &ExtrapolationOptions,
) -> Result<ExtrapolationTable> {
    let test: Vec<_> = corpus.test().collect();
    if test.is_empty() {
        return Err(Error::Precondition("corpus has no test records on or after the split date".into()));
    }
    let results = test
        .par_iter()
        .map(|r| {
            let partial = PartialSurface::from_surface(&r.surface, mask)?;
            extrapolate(model, &partial, opts)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut per_symbol: BTreeMap<&str, (Tally, usize, usize)> = BTreeMap::new();
    let mut all = (Tally::default(), 0, 0);
    for (r, res) in test.iter().zip(&results) {
        let slot = per_symbol.entry(r.symbol.as_str()).or_default();
        for acc in [&mut *slot, &mut all] {
            acc.0.add(&r.surface, &res.surface, table, Some(mask));
            acc.1 += 1;
            acc.2 += usize::from(!res.converged);
        }
    }
    Ok(ExtrapolationTable {
        rows: per_symbol.into_iter().map(|(s, (t, n, u))| row(s.to_string(), &t, n, u)).collect(),
        overall: row("ALL".into(), &all.0, all.1, all.2),
    })
}

/// `symbol,mae_known,mae_unknown,satisfaction`, one row per symbol then `ALL`.
pub fn write_extrapolation_table<W: Write>(table: &ExtrapolationTable, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["symbol", "mae_known", "mae_unknown", "satisfaction"])?;
    for r in table.rows.iter().chain(std::iter::once(&table.overall)) {
        w.write_record([
            r.symbol.clone(),
            format_vol(r.mae_known),
            format_vol(r.mae_unknown),
            format_vol(r.satisfaction),
        ])?;
    }
    w.flush()?;
    Ok(())
}
