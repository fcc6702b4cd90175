//! Synthetic multi-asset corpus: one index plus stocks whose surfaces are
//! driven by three independent factors (level, skew, term structure).
//!
//! Index factors follow independent AR(1) paths. Each stock factor is an
//! affine function of the matching index factor plus idiosyncratic noise,
//! and each asset carries a close-price path whose instantaneous vol tracks
//! its level factor.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::softplus;
use crate::surface::{Corpus, GridSpec, SurfaceGrid, SurfaceRecord};

pub const INDEX_SYMBOL: &str = "IDX";
pub const TRADING_DAYS: f64 = 252.0;

const MIN_VOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FactorState {
    pub level: f64,
    pub skew: f64,
    pub term: f64,
}

impl FactorState {
    pub fn new(level: f64, skew: f64, term: f64) -> Self {
        Self { level, skew, term }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.level, self.skew, self.term]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

/// Skew weight by term: positive and decreasing, 2 at 3 months, 0.5 at 48 months.
pub fn skew_weight(term_months: f64) -> f64 {
    (12.0 / term_months).sqrt()
}

/// vol(tau, M) = softplus(level + skew * (1 - M) * w(tau) + term * ln(tau / 12)).
pub fn factor_to_surface(f: FactorState, grid: &GridSpec) -> SurfaceGrid {
    let vols = grid
        .points()
        .map(|(tau, m)| softplus(f.level + f.skew * (1.0 - m) * skew_weight(tau) + f.term * (tau / 12.0).ln()))
        .map(|v| v.max(MIN_VOL))
        .collect();
    SurfaceGrid::new(grid.clone(), vols).expect("softplus output is positive")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetSpec {
    pub symbol: String,
    pub beta_level: f64,
    pub beta_skew: f64,
    pub beta_term: f64,
    pub alpha_level: f64,
    pub alpha_skew: f64,
    pub alpha_term: f64,
    pub idio_scale: f64,
}

impl AssetSpec {
    pub fn index(symbol: impl Into<String>) -> Self {
        Self {
            symbol: symbol.into(),
            beta_level: 1.0,
            beta_skew: 1.0,
            beta_term: 1.0,
            alpha_level: 0.0,
            alpha_skew: 0.0,
            alpha_term: 0.0,
            idio_scale: 0.0,
        }
    }

    pub fn betas(&self) -> [f64; 3] {
        [self.beta_level, self.beta_skew, self.beta_term]
    }

    pub fn alphas(&self) -> [f64; 3] {
        [self.alpha_level, self.alpha_skew, self.alpha_term]
    }
}

/// Long-run mean, stationary standard deviation and daily persistence of the index factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorDynamics {
    pub mean: FactorState,
    pub sd: FactorState,
    pub persistence: f64,
}

impl Default for FactorDynamics {
    fn default() -> Self {
        Self {
            mean: FactorState::new(-1.5, 0.8, 0.05),
            sd: FactorState::new(0.18, 0.25, 0.08),
            persistence: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_stocks: usize,
    pub n_days: usize,
    pub start_date: NaiveDate,
    pub split_date: NaiveDate,
    /// Inclusive date interval.
    pub stress_window: (NaiveDate, NaiveDate),
    pub stress_level_shift: f64,
    pub noise_sd: f64,
    pub grid: GridSpec,
    pub dynamics: FactorDynamics,
}

impl SynthConfig {
    /// Desk scale: 8 stocks + index, 1250 business days, split at day 1000,
    /// 40-day stress window starting at day 650.
    pub fn desk(seed: u64) -> Self {
        let start = NaiveDate::from_ymd_opt(2017, 1, 2).expect("valid date");
        let dates = business_days(start, 1250);
        Self {
            seed,
            n_stocks: 8,
            n_days: 1250,
            start_date: start,
            split_date: dates[1000],
            stress_window: (dates[650], dates[689]),
            stress_level_shift: 0.6,
            noise_sd: 0.001,
            grid: GridSpec::canonical(),
            dynamics: FactorDynamics::default(),
        }
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        business_days(self.start_date, self.n_days)
    }

    fn validate(&self) -> Result<()> {
        if self.n_days < 2 {
            return Err(Error::Validation("n_days must be at least 2".into()));
        }
        let dates = self.dates();
        let (first, last) = (dates[0], dates[dates.len() - 1]);
        let (s, e) = self.stress_window;
        if s > e || s < first || e > last {
            return Err(Error::Validation(format!(
                "stress window {s}..{e} must lie inside {first}..{last}"
            )));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::Validation("noise_sd must be non-negative".into()));
        }
        let phi = self.dynamics.persistence;
        if !(0.0..1.0).contains(&phi) {
            return Err(Error::Validation("persistence must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Weekdays starting at `start` (moved forward to a weekday if needed).
pub fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d += Duration::days(1);
    }
    out
}

/// Stocks with betas near one and positive level premia, drawn from the config seed.
pub fn default_stocks(cfg: &SynthConfig) -> Vec<AssetSpec> {
    let mut rng = stream(cfg.seed, 6);
    let mean = cfg.dynamics.mean.to_array();
    (0..cfg.n_stocks)
        .map(|i| {
            let beta: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.85..1.15));
            let premium = [
                rng.random_range(0.05..0.30),
                rng.random_range(-0.10..0.10),
                rng.random_range(-0.02..0.02),
            ];
            let alpha: [f64; 3] = std::array::from_fn(|k| (1.0 - beta[k]) * mean[k] + premium[k]);
            AssetSpec {
                symbol: format!("S{:02}", i + 1),
                beta_level: beta[0],
                beta_skew: beta[1],
                beta_term: beta[2],
                alpha_level: alpha[0],
                alpha_skew: alpha[1],
                alpha_term: alpha[2],
                idio_scale: 0.1,
            }
        })
        .collect()
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricePoint {
    pub date: NaiveDate,
    pub symbol: String,
    pub close: f64,
}

/// Everything the generator produces. `factors` holds each symbol's factor path, index included.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub corpus: Corpus,
    pub prices: Vec<PricePoint>,
    pub factors: BTreeMap<String, Vec<FactorState>>,
    pub stocks: Vec<AssetSpec>,
    pub dates: Vec<NaiveDate>,
}

pub fn generate_corpus(cfg: &SynthConfig, stocks: &[AssetSpec]) -> Result<SynthOutput> {
    cfg.validate()?;
    if stocks.iter().any(|s| s.symbol == INDEX_SYMBOL) {
        return Err(Error::Validation(format!("stock symbol {INDEX_SYMBOL} is reserved for the index")));
    }
    let dates = cfg.dates();
    let n = dates.len();
    let dyn_ = cfg.dynamics;
    let phi = dyn_.persistence;
    let innov = (1.0 - phi * phi).sqrt();
    let mean = dyn_.mean.to_array();
    let sd = dyn_.sd.to_array();

    // Independent AR(1) path per factor, each from its own stream.
    let mut index_paths = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for (k, path) in index_paths.iter_mut().enumerate() {
        let mut rng = stream(cfg.seed, k as u64);
        let mut x = mean[k] + sd[k] * normal(&mut rng);
        for slot in path.iter_mut() {
            *slot = x;
            x = mean[k] + phi * (x - mean[k]) + sd[k] * innov * normal(&mut rng);
        }
    }
    let stressed: Vec<bool> = dates
        .iter()
        .map(|d| *d >= cfg.stress_window.0 && *d <= cfg.stress_window.1)
        .collect();
    let index_factors: Vec<FactorState> = (0..n)
        .map(|t| {
            let shift = if stressed[t] { cfg.stress_level_shift } else { 0.0 };
            FactorState::new(index_paths[0][t] + shift, index_paths[1][t], index_paths[2][t])
        })
        .collect();

    let mut factors = BTreeMap::new();
    factors.insert(INDEX_SYMBOL.to_string(), index_factors.clone());
    let mut idio_rng = stream(cfg.seed, 3);
    for s in stocks {
        let (a, b) = (s.alphas(), s.betas());
        let path = index_factors
            .iter()
            .map(|f| {
                let fi = f.to_array();
                FactorState::from_array(std::array::from_fn(|k| {
                    a[k] + b[k] * fi[k] + s.idio_scale * sd[k] * normal(&mut idio_rng)
                }))
            })
            .collect();
        factors.insert(s.symbol.clone(), path);
    }

    let mut noise_rng = stream(cfg.seed, 4);
    let mut price_rng = stream(cfg.seed, 5);
    let symbols: Vec<String> = std::iter::once(INDEX_SYMBOL.to_string())
        .chain(stocks.iter().map(|s| s.symbol.clone()))
        .collect();
    let mut records = Vec::with_capacity(n * symbols.len());
    let mut prices = Vec::with_capacity(n * symbols.len());
    for sym in &symbols {
        let path = &factors[sym];
        let mut close = 100.0;
        for (t, f) in path.iter().enumerate() {
            let clean = factor_to_surface(*f, &cfg.grid);
            let vols = clean
                .as_slice()
                .iter()
                .map(|v| (v + cfg.noise_sd * normal(&mut noise_rng)).max(MIN_VOL))
                .collect();
            records.push(SurfaceRecord {
                date: dates[t],
                symbol: sym.clone(),
                surface: SurfaceGrid::new(cfg.grid.clone(), vols)?,
                stress: stressed[t],
            });
            if t > 0 {
                let sigma = softplus(f.level);
                let dt = 1.0 / TRADING_DAYS;
                close *= (-0.5 * sigma * sigma * dt + sigma * dt.sqrt() * normal(&mut price_rng)).exp();
            }
            prices.push(PricePoint {
                date: dates[t],
                symbol: sym.clone(),
                close,
            });
        }
    }

    Ok(SynthOutput {
        corpus: Corpus::new(records, cfg.split_date)?,
        prices,
        factors,
        stocks: stocks.to_vec(),
        dates,
    })
}

/// Annualized sample standard deviation of log returns over a trailing window of `window` returns.
/// The first output is dated at the `window`-th price.
pub fn realized_vol(prices: &[(NaiveDate, f64)], window: usize) -> Result<Vec<(NaiveDate, f64)>> {
    if window < 2 {
        return Err(Error::Validation("realized-vol window must be at least 2".into()));
    }
    if prices.len() <= window {
        return Err(Error::Validation(format!(
            "realized-vol window {window} needs more than {window} prices, got {}",
            prices.len()
        )));
    }
    if prices.iter().any(|(_, p)| !(p.is_finite() && *p > 0.0)) {
        return Err(Error::Validation("prices must be positive".into()));
    }
    let rets: Vec<f64> = prices.windows(2).map(|w| (w[1].1 / w[0].1).ln()).collect();
    Ok((window..prices.len())
        .map(|i| {
            let slice = &rets[i - window..i];
            let mean = slice.iter().sum::<f64>() / window as f64;
            let var = slice.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (window - 1) as f64;
            (prices[i].0, (var * TRADING_DAYS).sqrt())
        })
        .collect())
}

pub const PRICE_HEADER: [&str; 3] = ["date", "symbol", "close"];

pub fn write_prices<W: Write>(prices: &[PricePoint], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(PRICE_HEADER)?;
    for p in prices {
        wtr.write_record([p.date.to_string(), p.symbol.clone(), format!("{:.12}", p.close)])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_prices(prices: &[PricePoint], path: impl AsRef<Path>) -> Result<()> {
    write_prices(prices, std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn read_prices<R: Read>(reader: R) -> Result<Vec<PricePoint>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header != PRICE_HEADER {
        return Err(Error::Schema(format!("expected header `{}`", PRICE_HEADER.join(","))));
    }
    let mut out = Vec::new();
    for row in rdr.deserialize::<PricePoint>() {
        out.push(row?);
    }
    Ok(out)
}

pub fn load_prices(path: impl AsRef<Path>) -> Result<Vec<PricePoint>> {
    read_prices(std::fs::File::open(path)?)
}

/// Close-price series per symbol in date order.
pub fn price_series(prices: &[PricePoint]) -> BTreeMap<String, Vec<(NaiveDate, f64)>> {
    let mut map: BTreeMap<String, Vec<(NaiveDate, f64)>> = BTreeMap::new();
    for p in prices {
        map.entry(p.symbol.clone()).or_default().push((p.date, p.close));
    }
    for v in map.values_mut() {
        v.sort_by_key(|(d, _)| *d);
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(seed: u64) -> SynthConfig {
        let start = NaiveDate::from_ymd_opt(2019, 1, 1).unwrap();
        let dates = business_days(start, 120);
        SynthConfig {
            seed,
            n_stocks: 2,
            n_days: 120,
            start_date: start,
            split_date: dates[100],
            stress_window: (dates[40], dates[59]),
            stress_level_shift: 0.8,
            noise_sd: 0.001,
            grid: GridSpec::canonical(),
            dynamics: FactorDynamics::default(),
        }
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn flat_surface_without_skew_or_term() {
        let s = factor_to_surface(FactorState::new(-1.5, 0.0, 0.0), &GridSpec::canonical());
        let expect = softplus(-1.5);
        assert!(s.as_slice().iter().all(|v| (v - expect).abs() < 1e-15));
    }

    #[test]
    fn positive_term_factor_raises_long_end() {
        let g = GridSpec::canonical();
        let s = factor_to_surface(FactorState::new(-1.5, 0.0, 0.1), &g);
        for j in 0..g.n_moneyness() {
            assert!(s.vol(7, j) > s.vol(0, j));
        }
    }

    #[test]
    fn grid_mean_increasing_in_level() {
        let g = GridSpec::canonical();
        let means: Vec<f64> = (0..100)
            .map(|i| factor_to_surface(FactorState::new(-3.0 + 0.05 * i as f64, 0.8, 0.05), &g).mean())
            .collect();
        assert!(means.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn index_only_corpus() {
        let mut cfg = small_cfg(1);
        cfg.n_stocks = 0;
        let out = generate_corpus(&cfg, &[]).unwrap();
        assert_eq!(out.corpus.symbols(), vec![INDEX_SYMBOL.to_string()]);
        assert_eq!(out.corpus.len(), 120);
    }

    #[test]
    fn stress_window_raises_index_vol() {
        let cfg = small_cfg(2);
        let out = generate_corpus(&cfg, &default_stocks(&cfg)).unwrap();
        let (mut s, mut ns) = (Vec::new(), Vec::new());
        for r in out.corpus.series(INDEX_SYMBOL) {
            if r.stress {
                s.push(r.surface.mean())
            } else {
                ns.push(r.surface.mean())
            }
        }
        assert_eq!(s.len(), 20);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&s) > mean(&ns));
    }

    #[test]
    fn deterministic_csv() {
        let cfg = small_cfg(9);
        let render = || {
            let out = generate_corpus(&cfg, &default_stocks(&cfg)).unwrap();
            let mut buf = Vec::new();
            crate::surface::write_records(out.corpus.records(), &mut buf).unwrap();
            write_prices(&out.prices, &mut buf).unwrap();
            buf
        };
        assert_eq!(render(), render());
    }

    #[test]
    fn invalid_stress_window() {
        let mut cfg = small_cfg(1);
        cfg.stress_window = (cfg.stress_window.1, cfg.stress_window.0);
        assert!(generate_corpus(&cfg, &[]).is_err());
        let mut cfg = small_cfg(1);
        cfg.stress_window.1 = NaiveDate::from_ymd_opt(2030, 1, 1).unwrap();
        assert!(generate_corpus(&cfg, &[]).is_err());
    }

    #[test]
    fn index_spec_is_neutral() {
        let idx = AssetSpec::index("IDX");
        assert_eq!(idx.betas(), [1.0; 3]);
        assert_eq!(idx.alphas(), [0.0; 3]);
        assert_eq!(idx.idio_scale, 0.0);
    }

    #[test]
    fn planted_factor_independence() {
        let mut cfg = SynthConfig::desk(7);
        cfg.stress_level_shift = 0.0;
        let out = generate_corpus(&cfg, &[]).unwrap();
        let f = &out.factors[INDEX_SYMBOL];
        let cols: Vec<Vec<f64>> = (0..3).map(|k| f.iter().map(|x| x.to_array()[k]).collect()).collect();
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            assert!(pearson(&cols[i], &cols[j]).abs() <= 0.1, "rho {i}{j}");
        }
    }

    #[test]
    fn generated_surfaces_positive() {
        let cfg = small_cfg(4);
        let out = generate_corpus(&cfg, &default_stocks(&cfg)).unwrap();
        assert!(out.corpus.records().iter().all(|r| r.surface.as_slice().iter().all(|v| *v > 0.0)));
    }

    #[test]
    fn realized_vol_constant_prices() {
        let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        let p: Vec<_> = business_days(start, 30).into_iter().map(|d| (d, 50.0)).collect();
        let rv = realized_vol(&p, 10).unwrap();
        assert_eq!(rv.len(), 20);
        assert!(rv.iter().all(|(_, v)| *v == 0.0));
        assert_eq!(rv[0].0, p[10].0);
    }

    #[test]
    fn realized_vol_alternating() {
        let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        let x = 0.01f64;
        let p: Vec<_> = business_days(start, 11)
            .into_iter()
            .enumerate()
            .map(|(i, d)| (d, if i % 2 == 0 { 20.0 } else { 20.0 * x.exp() }))
            .collect();
        // returns alternate +x, -x: mean 0, sample variance (x^2 + x^2) / (2 - 1)
        let expect = (252.0 * 2.0 * x * x).sqrt();
        for (_, v) in realized_vol(&p, 2).unwrap() {
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn realized_vol_window_too_long() {
        let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        let p: Vec<_> = business_days(start, 252).into_iter().map(|d| (d, 1.0)).collect();
        assert!(realized_vol(&p, 252).is_err());
        assert!(realized_vol(&p, 251).is_ok());
    }

    #[test]
    fn prices_roundtrip() {
        let cfg = small_cfg(3);
        let out = generate_corpus(&cfg, &default_stocks(&cfg)).unwrap();
        let mut buf = Vec::new();
        write_prices(&out.prices, &mut buf).unwrap();
        let back = read_prices(buf.as_slice()).unwrap();
        assert_eq!(back.len(), out.prices.len());
        for (a, b) in out.prices.iter().zip(&back) {
            assert!((a.close - b.close).abs() < 1e-9);
        }
    }
}
