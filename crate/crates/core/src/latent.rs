//! Latent-space diagnostics: corpus encoding, correlation analysis,
//! latent-to-factor matching and one-dimensional scenario sweeps.

use std::io::Write;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{EvalReport, Tally, ThresholdTable};
use crate::surface::{format_vol, write_records, Corpus, GridSpec, SurfaceGrid, SurfaceRecord};
use crate::vae::{LatentCode, VaeModel};

/// Anything that turns a latent vector into a surface.
pub trait LatentDecoder {
    fn latent_dim(&self) -> usize;
    fn grid(&self) -> &GridSpec;
    fn decode_latent(&self, z: &[f64]) -> Result<SurfaceGrid>;
}

impl LatentDecoder for VaeModel {
    fn latent_dim(&self) -> usize {
        VaeModel::latent_dim(self)
    }

    fn grid(&self) -> &GridSpec {
        VaeModel::grid(self)
    }

    fn decode_latent(&self, z: &[f64]) -> Result<SurfaceGrid> {
        self.decode(z)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedEntry {
    pub date: NaiveDate,
    pub symbol: String,
    pub stress: bool,
    pub code: LatentCode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedCorpus {
    latent_dim: usize,
    entries: Vec<EncodedEntry>,
}

impl EncodedCorpus {
    pub fn new(latent_dim: usize, entries: Vec<EncodedEntry>) -> Result<Self> {
        if let Some(e) = entries.iter().find(|e| e.code.dim() != latent_dim || e.code.log_sigma.len() != latent_dim) {
            return Err(Error::Dimension {
                context: "encoded entry",
                expected: latent_dim,
                actual: e.code.dim(),
            });
        }
        Ok(Self { latent_dim, entries })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn entries(&self) -> &[EncodedEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries kept by `keep`, same latent dimension.
    pub fn filtered(&self, keep: impl Fn(&EncodedEntry) -> bool) -> Self {
        Self {
            latent_dim: self.latent_dim,
            entries: self.entries.iter().filter(|e| keep(e)).cloned().collect(),
        }
    }

    /// Entries dated on or after `split`.
    pub fn from_date(&self, split: NaiveDate) -> Self {
        self.filtered(|e| e.date >= split)
    }

    /// mu values per latent dimension.
    pub fn mu_columns(&self) -> Vec<Vec<f64>> {
        (0..self.latent_dim)
            .map(|k| self.entries.iter().map(|e| e.code.mu[k]).collect())
            .collect()
    }

    /// Date-ordered mu series for one symbol.
    pub fn mu_series(&self, symbol: &str) -> Vec<(NaiveDate, Vec<f64>)> {
        self.entries
            .iter()
            .filter(|e| e.symbol == symbol)
            .map(|e| (e.date, e.code.mu.clone()))
            .collect()
    }
}

/// Encodes every record (in corpus order) to its deterministic code.
pub fn encode_corpus(model: &VaeModel, corpus: &Corpus) -> Result<EncodedCorpus> {
    if let Some(g) = corpus.grid() {
        model.grid().ensure_matches(g)?;
    }
    let entries = corpus
        .records()
        .par_iter()
        .map(|r| {
            Ok(EncodedEntry {
                date: r.date,
                symbol: r.symbol.clone(),
                stress: r.stress,
                code: model.encode(r.surface.as_slice())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EncodedCorpus::new(model.latent_dim(), entries)
}

/// Encode-decode reconstruction scores, per symbol and pooled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionTable {
    pub rows: Vec<(String, EvalReport)>,
    pub overall: EvalReport,
}

/// Reconstructs each record through `mu` and scores it against the original.
pub fn evaluate_reconstruction<'a>(
    model: &VaeModel,
    records: impl IntoIterator<Item = &'a SurfaceRecord>,
    table: &ThresholdTable,
) -> Result<ReconstructionTable> {
    let records: Vec<&SurfaceRecord> = records.into_iter().collect();
    let preds = records
        .par_iter()
        .map(|r| {
            model.grid().ensure_matches(r.surface.grid())?;
            model.decode(&model.encode(r.surface.as_slice())?.mu)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut per_symbol: std::collections::BTreeMap<&str, Tally> = Default::default();
    let mut all = Tally::default();
    for (r, p) in records.iter().zip(&preds) {
        per_symbol.entry(r.symbol.as_str()).or_default().add(&r.surface, p, table, None);
        all.add(&r.surface, p, table, None);
    }
    Ok(ReconstructionTable {
        rows: per_symbol.into_iter().map(|(s, t)| (s.to_string(), t.report())).collect(),
        overall: all.report(),
    })
}

/// `symbol,points,satisfaction,mae`, one row per symbol then `ALL`.
pub fn write_reconstruction_table<W: Write>(table: &ReconstructionTable, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["symbol", "points", "satisfaction", "mae"])?;
    let all = ("ALL".to_string(), table.overall);
    for (sym, rep) in table.rows.iter().chain(std::iter::once(&all)) {
        w.write_record([sym.clone(), rep.points.to_string(), format_vol(rep.rate), format_vol(rep.mae)])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub matrix: Vec<Vec<f64>>,
    /// Dimensions with zero variance; their off-diagonal correlations are reported as 0.
    pub zero_variance: Vec<usize>,
}

impl CorrelationReport {
    pub fn max_abs_off_diagonal(&self) -> f64 {
        let d = self.matrix.len();
        (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| self.matrix[i][j].abs())
            .fold(0.0, f64::max)
    }
}

/// Pearson correlations of mu across entries.
pub fn latent_correlations(enc: &EncodedCorpus) -> Result<CorrelationReport> {
    correlation_matrix(&enc.mu_columns())
}

/// Pearson correlation matrix of equally long columns. Needs at least 3 rows.
pub fn correlation_matrix(columns: &[Vec<f64>]) -> Result<CorrelationReport> {
    let d = columns.len();
    let n = columns.first().map_or(0, Vec::len);
    if n < 3 {
        return Err(Error::Precondition(format!("correlations need at least 3 entries, got {n}")));
    }
    if let Some(c) = columns.iter().find(|c| c.len() != n) {
        return Err(Error::Dimension {
            context: "correlation column",
            expected: n,
            actual: c.len(),
        });
    }
    let nf = n as f64;
    let centered: Vec<Vec<f64>> = columns
        .iter()
        .map(|c| {
            let m = c.iter().sum::<f64>() / nf;
            c.iter().map(|v| v - m).collect()
        })
        .collect();
    let norms: Vec<f64> = centered.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let zero_variance: Vec<usize> = (0..d).filter(|&k| norms[k] == 0.0).collect();
    for k in &zero_variance {
        log::warn!("latent dimension {} has zero variance; its correlations are reported as 0", k + 1);
    }
    let mut matrix = vec![vec![0.0; d]; d];
    for i in 0..d {
        matrix[i][i] = 1.0;
        for j in i + 1..d {
            let r = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                let dot: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
                (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
            matrix[i][j] = r;
            matrix[j][i] = r;
        }
    }
    Ok(CorrelationReport { matrix, zero_variance })
}

/// Decodes `base_z` with coordinate `dim` replaced by each value in turn.
pub fn scenario_sweep<D: LatentDecoder + ?Sized>(
    decoder: &D,
    base_z: &[f64],
    dim: usize,
    values: &[f64],
) -> Result<Vec<SurfaceGrid>> {
    let d = decoder.latent_dim();
    if base_z.len() != d {
        return Err(Error::Dimension {
            context: "sweep base",
            expected: d,
            actual: base_z.len(),
        });
    }
    if dim >= d {
        return Err(Error::Validation(format!("sweep dimension {} is out of range for D = {d}", dim + 1)));
    }
    values
        .iter()
        .map(|&v| {
            let mut z = base_z.to_vec();
            z[dim] = v;
            decoder.decode_latent(&z)
        })
        .collect()
}

/// Evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    match steps {
        0 => vec![],
        1 => vec![lo],
        _ => (0..steps).map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64).collect(),
    }
}

/// Surface characteristics a latent can be matched to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Level,
    Skew,
    Term,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Level, Role::Skew, Role::Term];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Level => "level",
            Role::Skew => "skew",
            Role::Term => "term",
        }
    }
}

/// Grid mean vol, mean log-vol slope against moneyness, mean log-vol slope against log term.
pub fn response_statistics(s: &SurfaceGrid) -> [f64; 3] {
    let g = s.grid();
    let logv: Vec<Vec<f64>> = s.rows().iter().map(|r| r.iter().map(|v| v.ln()).collect()).collect();
    let skew = (0..g.n_terms()).map(|t| ols_slope(g.moneyness(), &logv[t])).sum::<f64>() / g.n_terms() as f64;
    let log_terms: Vec<f64> = g.terms().iter().map(|t| t.ln()).collect();
    let term = (0..g.n_moneyness())
        .map(|m| {
            let col: Vec<f64> = logv.iter().map(|row| row[m]).collect();
            ols_slope(&log_terms, &col)
        })
        .sum::<f64>()
        / g.n_moneyness() as f64;
    [s.mean(), skew, term]
}

fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    if x.len() < 2 {
        return 0.0;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Where to sweep each latent when matching factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub base: Vec<f64>,
    /// Inclusive `(lo, hi)` per latent dimension.
    pub ranges: Vec<(f64, f64)>,
    pub steps: usize,
}

impl SweepConfig {
    /// z in [-2, 2] over 21 steps around the origin.
    pub fn standard(latent_dim: usize) -> Self {
        Self {
            base: vec![0.0; latent_dim],
            ranges: vec![(-2.0, 2.0); latent_dim],
            steps: 21,
        }
    }

    /// Mean mu plus or minus `width` standard deviations of the encoded mu, per dimension.
    pub fn around(enc: &EncodedCorpus, width: f64, steps: usize) -> Result<Self> {
        if enc.len() < 2 {
            return Err(Error::Precondition("need at least 2 encodings to size a sweep".into()));
        }
        let n = enc.len() as f64;
        let mut base = Vec::new();
        let mut ranges = Vec::new();
        for col in enc.mu_columns() {
            let m = col.iter().sum::<f64>() / n;
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            base.push(m);
            ranges.push((m - width * sd, m + width * sd));
        }
        Ok(Self { base, ranges, steps })
    }
}

/// Assignment of latent dimensions to surface roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorMatch {
    /// Role of each latent dimension.
    pub roles: Vec<Role>,
    /// +1 when increasing the latent increases its role statistic.
    pub signs: Vec<i8>,
    /// Signed change of each statistic across the sweep, latent x role.
    pub responses: Vec<Vec<f64>>,
    /// Response magnitudes normalized by the largest in each role column.
    pub scores: Vec<Vec<f64>>,
    /// Smallest ratio of an assigned score to any competing score in its row or column.
    pub dominance: f64,
}

impl FactorMatch {
    pub fn latent_for(&self, role: Role) -> usize {
        self.roles.iter().position(|r| *r == role).expect("every role is assigned")
    }

    /// Latent index for level, skew and term, in that order.
    pub fn permutation(&self) -> [usize; 3] {
        Role::ALL.map(|r| self.latent_for(r))
    }

    /// Latent value expressed in the role's increasing direction.
    pub fn oriented(&self, mu: &[f64], role: Role) -> f64 {
        let k = self.latent_for(role);
        self.signs[k] as f64 * mu[k]
    }
}

const DOMINANCE_CAP: f64 = 1e9;
/// Two latents within this relative margin on one statistic make the match degenerate.
const DEGENERACY_MARGIN: f64 = 0.1;

/// Sweeps each latent alone, measures the three response statistics and
/// assigns latents to roles by maximum total normalized response.
pub fn match_factors<D: LatentDecoder + Sync + ?Sized>(decoder: &D, cfg: &SweepConfig) -> Result<FactorMatch> {
    let d = decoder.latent_dim();
    if d != 3 {
        return Err(Error::Precondition(format!("factor matching needs D = 3, got {d}")));
    }
    if cfg.base.len() != d || cfg.ranges.len() != d {
        return Err(Error::Dimension {
            context: "sweep config",
            expected: d,
            actual: cfg.base.len().min(cfg.ranges.len()),
        });
    }
    if cfg.steps < 2 {
        return Err(Error::Validation("factor sweep needs at least 2 steps".into()));
    }
    let responses = (0..d)
        .into_par_iter()
        .map(|k| {
            let (lo, hi) = cfg.ranges[k];
            let stats: Vec<[f64; 3]> = scenario_sweep(decoder, &cfg.base, k, &linspace(lo, hi, cfg.steps))?
                .iter()
                .map(response_statistics)
                .collect();
            Ok((0..3)
                .map(|s| {
                    let col: Vec<f64> = stats.iter().map(|st| st[s]).collect();
                    let range = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                        - col.iter().cloned().fold(f64::INFINITY, f64::min);
                    let dir = col[col.len() - 1] - col[0];
                    if dir < 0.0 {
                        -range
                    } else {
                        range
                    }
                })
                .collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;

    let mut scores = vec![vec![0.0; 3]; d];
    for s in 0..3 {
        let top = (0..d).map(|k| responses[k][s].abs()).fold(0.0, f64::max);
        for k in 0..d {
            scores[k][s] = if top > 0.0 { responses[k][s].abs() / top } else { 0.0 };
        }
    }
    for s in 0..3 {
        let mut col: Vec<f64> = (0..d).map(|k| scores[k][s]).collect();
        col.sort_by(|a, b| b.total_cmp(a));
        if col[0] == 0.0 || col[1] >= (1.0 - DEGENERACY_MARGIN) * col[0] {
            return Err(Error::DegenerateAssignment { scores });
        }
    }

    // Brute force over the 6 assignments of latents to roles.
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let best = perms
        .iter()
        .max_by(|a, b| {
            let sa: f64 = (0..3).map(|r| scores[a[r]][r]).sum();
            let sb: f64 = (0..3).map(|r| scores[b[r]][r]).sum();
            sa.total_cmp(&sb)
        })
        .expect("non-empty");
    let mut roles = vec![Role::Level; d];
    for (r, &k) in best.iter().enumerate() {
        roles[k] = Role::ALL[r];
    }
    let signs: Vec<i8> = (0..d)
        .map(|k| if responses[k][roles[k].index()] < 0.0 { -1 } else { 1 })
        .collect();

    let mut dominance = DOMINANCE_CAP;
    for (r, &k) in best.iter().enumerate() {
        let own = scores[k][r];
        let col_rival = (0..d).filter(|&j| j != k).map(|j| scores[j][r]).fold(0.0, f64::max);
        let row_rival = (0..3).filter(|&s| s != r).map(|s| scores[k][s]).fold(0.0, f64::max);
        for rival in [col_rival, row_rival] {
            if rival > 0.0 {
                dominance = dominance.min(own / rival);
            }
        }
    }
    Ok(FactorMatch {
        roles,
        signs,
        responses,
        scores,
        dominance,
    })
}

/// Mean of the oriented level latent over stress and non-stress entries.
pub fn stress_contrast(enc: &EncodedCorpus, fm: &FactorMatch) -> Option<(f64, f64)> {
    let mut acc = [(0.0, 0usize); 2];
    for e in enc.entries() {
        let slot = &mut acc[e.stress as usize];
        slot.0 += fm.oriented(&e.code.mu, Role::Level);
        slot.1 += 1;
    }
    if acc[0].1 == 0 || acc[1].1 == 0 {
        return None;
    }
    Some((acc[1].0 / acc[1].1 as f64, acc[0].0 / acc[0].1 as f64))
}

/// `date,symbol,stress,mu_1..mu_D,log_sigma_1..log_sigma_D`.
pub fn write_encodings<W: Write>(enc: &EncodedCorpus, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let d = enc.latent_dim();
    let mut header = vec!["date".to_string(), "symbol".into(), "stress".into()];
    header.extend((1..=d).map(|k| format!("mu_{k}")));
    header.extend((1..=d).map(|k| format!("log_sigma_{k}")));
    w.write_record(&header)?;
    for e in enc.entries() {
        let mut row = vec![e.date.to_string(), e.symbol.clone(), u8::from(e.stress).to_string()];
        row.extend(e.code.mu.iter().chain(&e.code.log_sigma).map(|v| format_vol(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Square matrix with a `latent` label column.
pub fn write_correlations<W: Write>(report: &CorrelationReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let d = report.matrix.len();
    let mut header = vec!["latent".to_string()];
    header.extend((1..=d).map(|k| format!("z{k}")));
    w.write_record(&header)?;
    for (i, row) in report.matrix.iter().enumerate() {
        let mut rec = vec![format!("z{}", i + 1)];
        rec.extend(row.iter().map(|v| format_vol(*v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Sweep output in corpus CSV format; each step becomes a symbol `z<dim>=<value>`.
pub fn write_sweep<W: Write>(surfaces: &[SurfaceGrid], dim: usize, values: &[f64], date: NaiveDate, writer: W) -> Result<()> {
    if surfaces.len() != values.len() {
        return Err(Error::Dimension {
            context: "sweep values",
            expected: surfaces.len(),
            actual: values.len(),
        });
    }
    let records: Vec<SurfaceRecord> = surfaces
        .iter()
        .zip(values)
        .map(|(s, v)| SurfaceRecord {
            date,
            symbol: format!("z{}={v:+.6}", dim + 1),
            surface: s.clone(),
            stress: false,
        })
        .collect();
    write_records(&records, writer)
}
