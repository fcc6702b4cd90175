//! Single-stock surface inference from the index encoding.
//!
//! For each latent dimension `k` a trailing-window OLS regresses the stock's
//! encoded `mu_k` on the index's `mu_k` and the stock's standardized long-term
//! realized vol. The fitted relations predict the stock code on a later date,
//! which is then decoded to a full surface.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{Tally, ThresholdTable};
use crate::latent::{encode_corpus, EncodedCorpus};
use crate::surface::{format_vol, Corpus, SurfaceGrid};
use crate::synth::{price_series, realized_vol, PricePoint, INDEX_SYMBOL};
use crate::vae::VaeModel;

/// Trading days of returns behind the long-term realized vol regressor.
pub const REALIZED_VOL_WINDOW: usize = 252;
pub const DEFAULT_WINDOW: usize = 60;
pub const MIN_WINDOW: usize = 10;

/// Coefficients are `[intercept, index slope, realized-vol slope]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentRegression {
    pub coefficients: [f64; 3],
    pub std_errors: [f64; 3],
    pub residual_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionWindowModel {
    /// One regression per latent dimension.
    pub regressions: Vec<LatentRegression>,
    pub window: usize,
    /// Last date inside the fitting window.
    pub fit_date: NaiveDate,
    /// Realized-vol mean and standard deviation over the window, used to standardize.
    pub rv_mean: f64,
    pub rv_sd: f64,
}

impl RegressionWindowModel {
    pub fn latent_dim(&self) -> usize {
        self.regressions.len()
    }

    pub fn standardize(&self, rv: f64) -> f64 {
        (rv - self.rv_mean) / self.rv_sd
    }

    /// Predicted stock code from the index code and the stock's realized vol.
    pub fn predict_latent(&self, index_mu: &[f64], rv: f64) -> Result<Vec<f64>> {
        if index_mu.len() != self.latent_dim() {
            return Err(Error::Dimension {
                context: "index code",
                expected: self.latent_dim(),
                actual: index_mu.len(),
            });
        }
        let x = self.standardize(rv);
        Ok(self
            .regressions
            .iter()
            .zip(index_mu)
            .map(|(r, m)| r.coefficients[0] + r.coefficients[1] * m + r.coefficients[2] * x)
            .collect())
    }
}

/// Ordinary least squares with an intercept column prepended to `columns`.
/// Returns coefficients, standard errors and the residual standard deviation.
pub fn ols(columns: &[(&'static str, &[f64])], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let n = y.len();
    let p = columns.len() + 1;
    if n <= p {
        return Err(Error::Precondition(format!("OLS needs more than {p} observations, got {n}")));
    }
    for (name, c) in columns {
        if c.len() != n {
            return Err(Error::Dimension {
                context: "regressor",
                expected: n,
                actual: c.len(),
            });
        }
        let mean = c.iter().sum::<f64>() / n as f64;
        let spread = c.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
        if spread <= 1e-12 * (1.0 + mean.abs()) {
            return Err(Error::RankDeficient { column: name });
        }
    }
    let x = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { columns[j - 1].1[i] });
    // Collinearity: a column explained by the ones before it leaves almost nothing in R's diagonal.
    let qr = x.clone().qr();
    let r = qr.r();
    let scale = (0..p).map(|j| x.column(j).norm()).collect::<Vec<_>>();
    for j in 1..p {
        if r[(j, j)].abs() <= 1e-10 * scale[j] {
            return Err(Error::RankDeficient { column: columns[j - 1].0 });
        }
    }
    let yv = DVector::from_column_slice(y);
    let qty = qr.q().transpose() * &yv;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or(Error::RankDeficient { column: columns[p - 2].0 })?;
    let resid = &yv - &x * &beta;
    let dof = (n - p) as f64;
    let sigma2 = resid.norm_squared() / dof;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or(Error::RankDeficient { column: columns[p - 2].0 })?;
    let xtx_inv = &r_inv * r_inv.transpose();
    let se = (0..p).map(|j| (sigma2 * xtx_inv[(j, j)]).max(0.0).sqrt()).collect();
    Ok((beta.iter().copied().collect(), se, sigma2.sqrt()))
}

/// A dated series of latent codes.
pub type LatentSeries = BTreeMap<NaiveDate, Vec<f64>>;
/// A dated scalar series.
pub type ScalarSeries = BTreeMap<NaiveDate, f64>;

/// Fits the per-latent regressions on the last `window` dates strictly before
/// `end` where the stock code, index code and realized vol are all present.
pub fn fit_window(
    stock: &LatentSeries,
    index: &LatentSeries,
    rv: &ScalarSeries,
    end: NaiveDate,
    window: usize,
) -> Result<RegressionWindowModel> {
    if window < MIN_WINDOW {
        return Err(Error::Validation(format!("regression window must be at least {MIN_WINDOW}, got {window}")));
    }
    let dates: Vec<NaiveDate> = stock
        .range(..end)
        .rev()
        .filter(|(d, _)| index.contains_key(d) && rv.contains_key(d))
        .take(window)
        .map(|(d, _)| *d)
        .collect();
    if dates.len() < window {
        return Err(Error::Precondition(format!(
            "only {} complete observations before {end}, window needs {window}",
            dates.len()
        )));
    }
    let dates: Vec<NaiveDate> = dates.into_iter().rev().collect();
    let d = stock[&dates[0]].len();
    let rvs: Vec<f64> = dates.iter().map(|t| rv[t]).collect();
    let n = window as f64;
    let rv_mean = rvs.iter().sum::<f64>() / n;
    let rv_sd = (rvs.iter().map(|v| (v - rv_mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if !(rv_sd > 1e-12 * (1.0 + rv_mean.abs())) {
        return Err(Error::RankDeficient { column: "realized_vol" });
    }
    let rv_std: Vec<f64> = rvs.iter().map(|v| (v - rv_mean) / rv_sd).collect();
    let mut regressions = Vec::with_capacity(d);
    for k in 0..d {
        let idx: Vec<f64> = dates.iter().map(|t| index[t][k]).collect();
        let y: Vec<f64> = dates.iter().map(|t| stock[t][k]).collect();
        let (b, se, sd) = ols(&[("index_latent", &idx), ("realized_vol", &rv_std)], &y)?;
        regressions.push(LatentRegression {
            coefficients: [b[0], b[1], b[2]],
            std_errors: [se[0], se[1], se[2]],
            residual_sd: sd,
        });
    }
    Ok(RegressionWindowModel {
        regressions,
        window,
        fit_date: *dates.last().expect("window is non-empty"),
        rv_mean,
        rv_sd,
    })
}

/// Decodes the regression prediction for date `t`. The fit must end strictly before `t`.
pub fn predict_surface(
    model: &VaeModel,
    reg: &RegressionWindowModel,
    t: NaiveDate,
    index_mu: &[f64],
    rv: f64,
) -> Result<SurfaceGrid> {
    if reg.fit_date >= t {
        return Err(Error::DateOrder(format!(
            "regression fitted through {} cannot predict {t}",
            reg.fit_date
        )));
    }
    model.decode(&reg.predict_latent(index_mu, rv)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRow {
    pub symbol: String,
    pub days: usize,
    /// Mean absolute error between predicted and encoded mu, per latent.
    pub z_errors: Vec<f64>,
    pub satisfaction: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceTable {
    pub rows: Vec<InferenceRow>,
}

impl InferenceTable {
    pub fn mean_satisfaction(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.satisfaction).sum::<f64>() / self.rows.len() as f64
    }
}

/// Per-symbol realized vol series from close prices.
pub fn realized_vol_series(prices: &[PricePoint], window: usize) -> Result<BTreeMap<String, ScalarSeries>> {
    price_series(prices)
        .into_iter()
        .map(|(sym, series)| Ok((sym, realized_vol(&series, window)?.into_iter().collect())))
        .collect()
}

/// Walk-forward over the test split: refit each stock's window before every
/// test date, predict from that date's index code and realized vol, and
/// score against the true surface and the true encoding.
pub fn evaluate_inference(
    model: &VaeModel,
    corpus: &Corpus,
    prices: &[PricePoint],
    window: usize,
    table: &ThresholdTable,
) -> Result<InferenceTable> {
    let enc = encode_corpus(model, corpus)?;
    let rv = realized_vol_series(prices, REALIZED_VOL_WINDOW)?;
    evaluate_inference_encoded(model, corpus, &enc, &rv, window, table)
}

/// [`evaluate_inference`] with the encodings and realized vols supplied.
pub fn evaluate_inference_encoded(
    model: &VaeModel,
    corpus: &Corpus,
    enc: &EncodedCorpus,
    rv: &BTreeMap<String, ScalarSeries>,
    window: usize,
    table: &ThresholdTable,
) -> Result<InferenceTable> {
    let split = corpus.split_date();
    let test_dates: Vec<NaiveDate> = corpus.dates().into_iter().filter(|d| *d >= split).collect();
    if test_dates.len() < window + 1 {
        return Err(Error::Precondition(format!(
            "test split has {} dates, needs at least {}",
            test_dates.len(),
            window + 1
        )));
    }
    let series = |sym: &str| -> LatentSeries { enc.mu_series(sym).into_iter().collect() };
    let index = series(INDEX_SYMBOL);
    if index.is_empty() {
        return Err(Error::Validation(format!("corpus has no `{INDEX_SYMBOL}` records")));
    }
    let stocks: Vec<String> = corpus.symbols().into_iter().filter(|s| s != INDEX_SYMBOL).collect();
    let rows = stocks
        .par_iter()
        .map(|sym| {
            let stock = series(sym);
            let stock_rv = rv
                .get(sym)
                .ok_or_else(|| Error::Validation(format!("no prices for `{sym}`")))?;
            let truth: BTreeMap<NaiveDate, &SurfaceGrid> =
                corpus.series(sym).into_iter().map(|r| (r.date, &r.surface)).collect();
            let mut tally = Tally::default();
            let mut z_abs = vec![0.0; model.latent_dim()];
            let mut days = 0usize;
            for &t in &test_dates {
                let (Some(true_surface), Some(true_mu), Some(index_mu), Some(&rv_t)) =
                    (truth.get(&t), stock.get(&t), index.get(&t), stock_rv.get(&t))
                else {
                    continue;
                };
                let reg = fit_window(&stock, &index, stock_rv, t, window)?;
                let z_hat = reg.predict_latent(index_mu, rv_t)?;
                let pred = predict_surface(model, &reg, t, index_mu, rv_t)?;
                tally.add(true_surface, &pred, table, None);
                for (acc, (a, b)) in z_abs.iter_mut().zip(z_hat.iter().zip(true_mu)) {
                    *acc += (a - b).abs();
                }
                days += 1;
            }
            let rep = tally.report();
            Ok(InferenceRow {
                symbol: sym.clone(),
                days,
                z_errors: z_abs.iter().map(|s| s / days.max(1) as f64).collect(),
                satisfaction: rep.rate,
                mae: rep.mae,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InferenceTable { rows })
}

/// `symbol,z1_error,...,satisfaction`, one row per stock then `MEAN`.
pub fn write_inference_table<W: Write>(table: &InferenceTable, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let d = table.rows.first().map_or(0, |r| r.z_errors.len());
    let mut header = vec!["symbol".to_string()];
    header.extend((1..=d).map(|k| format!("z{k}_error")));
    header.push("satisfaction".into());
    w.write_record(&header)?;
    for r in &table.rows {
        let mut rec = vec![r.symbol.clone()];
        rec.extend(r.z_errors.iter().map(|v| format_vol(*v)));
        rec.push(format_vol(r.satisfaction));
        w.write_record(&rec)?;
    }
    if !table.rows.is_empty() {
        let n = table.rows.len() as f64;
        let mut rec = vec!["MEAN".to_string()];
        rec.extend((0..d).map(|k| format_vol(table.rows.iter().map(|r| r.z_errors[k]).sum::<f64>() / n)));
        rec.push(format_vol(table.mean_satisfaction()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn dates(n: usize) -> Vec<NaiveDate> {
        crate::synth::business_days(NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(), n)
    }

    fn series(ds: &[NaiveDate], f: impl Fn(usize) -> Vec<f64>) -> LatentSeries {
        ds.iter().enumerate().map(|(i, d)| (*d, f(i))).collect()
    }

    fn rv_series(ds: &[NaiveDate]) -> ScalarSeries {
        ds.iter().enumerate().map(|(i, d)| (*d, 0.2 + 0.01 * (i as f64 * 0.37).sin())).collect()
    }

    #[test]
    fn identical_latents_give_unit_slope() {
        let ds = dates(80);
        let index = series(&ds, |i| vec![(i as f64 * 0.3).sin(), (i as f64 * 0.11).cos(), 0.01 * i as f64]);
        let reg = fit_window(&index, &index, &rv_series(&ds), ds[70], 60).unwrap();
        for r in &reg.regressions {
            assert!((r.coefficients[0]).abs() < 1e-10);
            assert!((r.coefficients[1] - 1.0).abs() < 1e-10);
            assert!((r.coefficients[2]).abs() < 1e-10);
        }
        assert_eq!(reg.fit_date, ds[69]);
    }

    #[test]
    fn shifted_latents_give_intercept() {
        let ds = dates(80);
        let index = series(&ds, |i| vec![(i as f64 * 0.3).sin(), (i as f64 * 0.11).cos(), 0.01 * i as f64]);
        let stock = series(&ds, |i| index[&ds[i]].iter().map(|v| v - 0.3).collect());
        let reg = fit_window(&stock, &index, &rv_series(&ds), ds[79], 60).unwrap();
        for r in &reg.regressions {
            assert!((r.coefficients[0] + 0.3).abs() < 1e-10);
            assert!((r.coefficients[1] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_realized_vol_is_rank_deficient() {
        let ds = dates(80);
        let index = series(&ds, |i| vec![(i as f64).sin()]);
        let rv: ScalarSeries = ds.iter().map(|d| (*d, 0.2)).collect();
        let err = fit_window(&index, &index, &rv, ds[79], 60).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { column: "realized_vol" }));
    }

    #[test]
    fn collinear_regressors_are_rank_deficient() {
        let x: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let y2: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let err = ols(&[("a", &x), ("b", &y2)], &x).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { column: "b" }));
    }

    #[test]
    fn short_history_and_tiny_window_rejected() {
        let ds = dates(30);
        let index = series(&ds, |i| vec![(i as f64).sin()]);
        assert!(matches!(
            fit_window(&index, &index, &rv_series(&ds), ds[20], 60),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            fit_window(&index, &index, &rv_series(&ds), ds[20], 5),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn planted_coefficients_within_three_standard_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let truth = [0.05, 0.9, -0.02];
        let (mut checks, mut inside) = (0, 0);
        for _ in 0..200 {
            let x1: Vec<f64> = (0..60).map(|_| rng.sample(StandardNormal)).collect();
            let x2: Vec<f64> = (0..60).map(|_| rng.sample(StandardNormal)).collect();
            let y: Vec<f64> = (0..60)
                .map(|i| {
                    let e: f64 = rng.sample(StandardNormal);
                    truth[0] + truth[1] * x1[i] + truth[2] * x2[i] + 0.01 * e
                })
                .collect();
            let (b, se, _) = ols(&[("x1", &x1), ("x2", &x2)], &y).unwrap();
            for j in 0..3 {
                checks += 1;
                inside += usize::from((b[j] - truth[j]).abs() <= 3.0 * se[j]);
            }
        }
        assert!(inside as f64 / checks as f64 >= 0.99, "{inside}/{checks}");
    }

    proptest! {
        #[test]
        fn residuals_orthogonal_to_regressors(
            rows in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0), 12..60)
        ) {
            let x1: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let x2: Vec<f64> = rows.iter().map(|r| r.1).collect();
            let y: Vec<f64> = rows.iter().map(|r| r.2).collect();
            let Ok((b, _, _)) = ols(&[("x1", &x1), ("x2", &x2)], &y) else { return Ok(()); };
            let resid: Vec<f64> = (0..y.len()).map(|i| y[i] - b[0] - b[1] * x1[i] - b[2] * x2[i]).collect();
            let scale: f64 = y.iter().map(|v| v.abs()).sum::<f64>() + 1.0;
            for col in [&x1, &x2] {
                let dot: f64 = resid.iter().zip(col.iter()).map(|(r, x)| r * x).sum();
                prop_assert!(dot.abs() < 1e-9 * scale * 10.0);
            }
            prop_assert!(resid.iter().sum::<f64>().abs() < 1e-9 * scale);
        }
    }
}
