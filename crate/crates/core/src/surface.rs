//! Surface grids, dated corpora and the long-form corpus CSV.
//!
//! A surface is stored as a flat row-major vector: row index is the term,
//! column index is the moneyness. Every other module relies on this order.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CANONICAL_TERMS: [f64; 8] = [3.0, 6.0, 9.0, 12.0, 18.0, 24.0, 36.0, 48.0];
pub const CANONICAL_MONEYNESS: [f64; 7] = [0.80, 0.90, 0.95, 1.00, 1.05, 1.10, 1.20];

/// Known-subset terms and moneyness used for extrapolation experiments.
pub const KNOWN_TERMS: [f64; 4] = [3.0, 6.0, 9.0, 12.0];
pub const KNOWN_MONEYNESS: [f64; 3] = [0.95, 1.00, 1.05];

const AXIS_TOL: f64 = 1e-9;

/// Term (months) and moneyness (K/S) axes of a surface grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    terms: Vec<f64>,
    moneyness: Vec<f64>,
}

impl GridSpec {
    pub fn new(terms: Vec<f64>, moneyness: Vec<f64>) -> Result<Self> {
        check_axis("terms", &terms)?;
        check_axis("moneyness", &moneyness)?;
        Ok(Self { terms, moneyness })
    }

    /// The 8 x 7 grid: terms 3..48 months, moneyness 0.80..1.20.
    pub fn canonical() -> Self {
        Self {
            terms: CANONICAL_TERMS.to_vec(),
            moneyness: CANONICAL_MONEYNESS.to_vec(),
        }
    }

    pub fn terms(&self) -> &[f64] {
        &self.terms
    }

    pub fn moneyness(&self) -> &[f64] {
        &self.moneyness
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn n_moneyness(&self) -> usize {
        self.moneyness.len()
    }

    pub fn len(&self) -> usize {
        self.terms.len() * self.moneyness.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index of (term index, moneyness index).
    pub fn index(&self, term_idx: usize, m_idx: usize) -> usize {
        term_idx * self.moneyness.len() + m_idx
    }

    /// (term, moneyness) at a flat index.
    pub fn point(&self, flat: usize) -> (f64, f64) {
        let nm = self.moneyness.len();
        (self.terms[flat / nm], self.moneyness[flat % nm])
    }

    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        (0..self.len()).map(|i| self.point(i))
    }

    pub fn term_index(&self, term: f64) -> Option<usize> {
        self.terms.iter().position(|t| (t - term).abs() <= AXIS_TOL)
    }

    pub fn moneyness_index(&self, m: f64) -> Option<usize> {
        self.moneyness.iter().position(|x| (x - m).abs() <= AXIS_TOL)
    }

    /// Same axes up to the parsing tolerance.
    pub fn matches(&self, other: &GridSpec) -> bool {
        fn same(a: &[f64], b: &[f64]) -> bool {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= AXIS_TOL)
        }
        same(&self.terms, &other.terms) && same(&self.moneyness, &other.moneyness)
    }

    pub fn ensure_matches(&self, other: &GridSpec) -> Result<()> {
        if self.matches(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "terms {:?} x moneyness {:?} vs terms {:?} x moneyness {:?}",
                self.terms, self.moneyness, other.terms, other.moneyness
            )))
        }
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::canonical()
    }
}

fn check_axis(name: &str, axis: &[f64]) -> Result<()> {
    if axis.is_empty() {
        return Err(Error::Validation(format!("{name} axis is empty")));
    }
    if axis.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::Validation(format!("{name} axis must be finite and positive")));
    }
    if axis.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Validation(format!("{name} axis must be strictly increasing")));
    }
    Ok(())
}

/// Boolean mask over the flattened grid, true exactly at the kept points.
pub fn subset_mask(grid: &GridSpec, terms_kept: &[f64], moneyness_kept: &[f64]) -> Result<Vec<bool>> {
    let mut term_rows = vec![false; grid.n_terms()];
    for &t in terms_kept {
        let i = grid
            .term_index(t)
            .ok_or_else(|| Error::Validation(format!("term {t} months is not on the grid")))?;
        term_rows[i] = true;
    }
    let mut m_cols = vec![false; grid.n_moneyness()];
    for &m in moneyness_kept {
        let j = grid
            .moneyness_index(m)
            .ok_or_else(|| Error::Validation(format!("moneyness {m} is not on the grid")))?;
        m_cols[j] = true;
    }
    Ok((0..grid.len())
        .map(|k| term_rows[k / grid.n_moneyness()] && m_cols[k % grid.n_moneyness()])
        .collect())
}

/// The 12-point short-term near-the-money mask on the canonical grid.
pub fn known_mask(grid: &GridSpec) -> Result<Vec<bool>> {
    subset_mask(grid, &KNOWN_TERMS, &KNOWN_MONEYNESS)
}

/// One implied-volatility surface, vols in decimal units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceGrid {
    grid: GridSpec,
    vols: Vec<f64>,
}

impl SurfaceGrid {
    pub fn new(grid: GridSpec, vols: Vec<f64>) -> Result<Self> {
        if vols.len() != grid.len() {
            return Err(Error::Dimension {
                context: "surface vols",
                expected: grid.len(),
                actual: vols.len(),
            });
        }
        if let Some((k, v)) = vols.iter().enumerate().find(|(_, v)| !v.is_finite() || **v <= 0.0) {
            let (t, m) = grid.point(k);
            return Err(Error::Validation(format!(
                "implied vol {v} at term {t}, moneyness {m} must be finite and positive"
            )));
        }
        Ok(Self { grid, vols })
    }

    /// Inverse of [`SurfaceGrid::flatten`].
    pub fn unflatten(grid: &GridSpec, vols: &[f64]) -> Result<Self> {
        Self::new(grid.clone(), vols.to_vec())
    }

    /// Builds a surface from term rows.
    pub fn from_rows(grid: GridSpec, rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() != grid.n_terms() {
            return Err(Error::Dimension {
                context: "surface rows",
                expected: grid.n_terms(),
                actual: rows.len(),
            });
        }
        let mut vols = Vec::with_capacity(grid.len());
        for row in rows {
            if row.len() != grid.n_moneyness() {
                return Err(Error::Dimension {
                    context: "surface row",
                    expected: grid.n_moneyness(),
                    actual: row.len(),
                });
            }
            vols.extend_from_slice(row);
        }
        Self::new(grid, vols)
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.vols.clone()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.vols
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn vol(&self, term_idx: usize, m_idx: usize) -> f64 {
        self.vols[self.grid.index(term_idx, m_idx)]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.vols.chunks(self.grid.n_moneyness()).map(<[f64]>::to_vec).collect()
    }

    pub fn mean(&self) -> f64 {
        self.vols.iter().sum::<f64>() / self.vols.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceRecord {
    pub date: NaiveDate,
    pub symbol: String,
    pub surface: SurfaceGrid,
    pub stress: bool,
}

/// Dated, symbol-tagged surfaces on a single grid, split into train and test by date.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    records: Vec<SurfaceRecord>,
    split_date: NaiveDate,
}

impl Corpus {
    /// Sorts records by (date, symbol) and rejects duplicates or mixed grids.
    pub fn new(mut records: Vec<SurfaceRecord>, split_date: NaiveDate) -> Result<Self> {
        records.sort_by(|a, b| (a.date, &a.symbol).cmp(&(b.date, &b.symbol)));
        for pair in records.windows(2) {
            if pair[0].date == pair[1].date && pair[0].symbol == pair[1].symbol {
                return Err(Error::Validation(format!(
                    "duplicate surface for {} on {}",
                    pair[0].symbol, pair[0].date
                )));
            }
        }
        if let Some(first) = records.first() {
            for r in &records[1..] {
                first.surface.grid().ensure_matches(r.surface.grid())?;
            }
        }
        Ok(Self { records, split_date })
    }

    pub fn records(&self) -> &[SurfaceRecord] {
        &self.records
    }

    pub fn split_date(&self) -> NaiveDate {
        self.split_date
    }

    pub fn with_split_date(mut self, split_date: NaiveDate) -> Self {
        self.split_date = split_date;
        self
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn grid(&self) -> Option<&GridSpec> {
        self.records.first().map(|r| r.surface.grid())
    }

    pub fn train(&self) -> impl Iterator<Item = &SurfaceRecord> {
        let split = self.split_date;
        self.records.iter().filter(move |r| r.date < split)
    }

    pub fn test(&self) -> impl Iterator<Item = &SurfaceRecord> {
        let split = self.split_date;
        self.records.iter().filter(move |r| r.date >= split)
    }

    pub fn symbols(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.symbol.as_str()).collect();
        set.into_iter().map(str::to_owned).collect()
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        let set: BTreeSet<NaiveDate> = self.records.iter().map(|r| r.date).collect();
        set.into_iter().collect()
    }

    /// Records of one symbol in date order.
    pub fn series(&self, symbol: &str) -> Vec<&SurfaceRecord> {
        self.records.iter().filter(|r| r.symbol == symbol).collect()
    }

    /// Date at 80% of the distinct dates, used when a file carries no split.
    pub fn default_split(dates: &[NaiveDate]) -> Option<NaiveDate> {
        if dates.is_empty() {
            return None;
        }
        let idx = (dates.len() * 4 / 5).min(dates.len() - 1);
        Some(dates[idx])
    }
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    date: NaiveDate,
    symbol: String,
    term_months: f64,
    moneyness: f64,
    implied_vol: f64,
    stress: u8,
}

pub const CORPUS_HEADER: [&str; 6] = ["date", "symbol", "term_months", "moneyness", "implied_vol", "stress"];

/// Shortest decimal that parses back to the same `f64`.
pub fn format_vol(v: f64) -> String {
    format!("{v}")
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let file = std::fs::File::open(path.as_ref())?;
    read_corpus(file)
}

/// Parses corpus CSV; the grid is the set of distinct (term, moneyness) values in the file.
pub fn read_corpus<R: Read>(reader: R) -> Result<Corpus> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header != CORPUS_HEADER {
        return Err(Error::Schema(format!(
            "expected header `{}`, found `{}`",
            CORPUS_HEADER.join(","),
            header.join(",")
        )));
    }
    let mut rows = Vec::new();
    for (line, row) in rdr.deserialize::<CsvRow>().enumerate() {
        let row = row?;
        if !row.implied_vol.is_finite() || row.implied_vol <= 0.0 {
            return Err(Error::Validation(format!(
                "row {}: implied vol {} for {} on {} must be positive",
                line + 2,
                row.implied_vol,
                row.symbol,
                row.date
            )));
        }
        if row.stress > 1 {
            return Err(Error::Schema(format!("row {}: stress must be 0 or 1", line + 2)));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Schema("corpus file has no rows".into()));
    }

    let grid = GridSpec::new(distinct(rows.iter().map(|r| r.term_months)), distinct(rows.iter().map(|r| r.moneyness)))?;

    let mut surfaces: BTreeMap<(NaiveDate, String), (Vec<Option<f64>>, Option<bool>)> = BTreeMap::new();
    for row in rows {
        let ti = grid.term_index(row.term_months).expect("term collected from file");
        let mi = grid.moneyness_index(row.moneyness).expect("moneyness collected from file");
        let entry = surfaces
            .entry((row.date, row.symbol.clone()))
            .or_insert_with(|| (vec![None; grid.len()], None));
        let slot = &mut entry.0[grid.index(ti, mi)];
        if slot.is_some() {
            return Err(Error::Schema(format!(
                "duplicate point for {} on {}: term {}, moneyness {}",
                row.symbol, row.date, row.term_months, row.moneyness
            )));
        }
        *slot = Some(row.implied_vol);
        let stress = row.stress == 1;
        match entry.1 {
            None => entry.1 = Some(stress),
            Some(s) if s != stress => {
                return Err(Error::Schema(format!(
                    "inconsistent stress flag for {} on {}",
                    row.symbol, row.date
                )))
            }
            Some(_) => {}
        }
    }

    let mut records = Vec::with_capacity(surfaces.len());
    for ((date, symbol), (vols, stress)) in surfaces {
        let mut full = Vec::with_capacity(grid.len());
        for (k, v) in vols.into_iter().enumerate() {
            match v {
                Some(v) => full.push(v),
                None => {
                    let (term_months, moneyness) = grid.point(k);
                    return Err(Error::MissingPoint {
                        date,
                        symbol,
                        term_months,
                        moneyness,
                    });
                }
            }
        }
        records.push(SurfaceRecord {
            date,
            symbol,
            surface: SurfaceGrid::new(grid.clone(), full)?,
            stress: stress.unwrap_or(false),
        });
    }
    let dates: Vec<NaiveDate> = records.iter().map(|r| r.date).collect::<BTreeSet<_>>().into_iter().collect();
    let split = Corpus::default_split(&dates).expect("non-empty corpus");
    Corpus::new(records, split)
}

fn distinct(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup_by(|a, b| (*a - *b).abs() <= AXIS_TOL);
    v
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    write_records(corpus.records(), std::io::BufWriter::new(file))
}

pub fn write_records<'a, W: Write>(records: impl IntoIterator<Item = &'a SurfaceRecord>, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(CORPUS_HEADER)?;
    for rec in records {
        let date = rec.date.to_string();
        let stress = if rec.stress { "1" } else { "0" };
        for (k, (t, m)) in rec.surface.grid().points().enumerate() {
            wtr.write_record([
                date.as_str(),
                rec.symbol.as_str(),
                &t.to_string(),
                &m.to_string(),
                &format_vol(rec.surface.as_slice()[k]),
                stress,
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn date(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn csv_for(vols: &[f64], skip: Option<usize>) -> String {
        let grid = GridSpec::canonical();
        let mut s = CORPUS_HEADER.join(",") + "\n";
        for (k, (t, m)) in grid.points().enumerate() {
            if Some(k) == skip {
                continue;
            }
            s += &format!("2020-03-02,IDX,{t},{m},{},0\n", vols[k]);
        }
        s
    }

    #[test]
    fn canonical_grid_shape() {
        let g = GridSpec::canonical();
        assert_eq!(g.len(), 56);
        assert_eq!(g.point(0), (3.0, 0.80));
        assert_eq!(g.point(55), (48.0, 1.20));
    }

    #[test]
    fn grid_rejects_unsorted_axes() {
        assert!(GridSpec::new(vec![3.0, 3.0], vec![1.0]).is_err());
        assert!(GridSpec::new(vec![3.0], vec![1.0, 0.9]).is_err());
    }

    #[test]
    fn flatten_constant_and_ordering() {
        let g = GridSpec::canonical();
        let s = SurfaceGrid::new(g.clone(), vec![0.25; 56]).unwrap();
        assert_eq!(s.flatten(), vec![0.25; 56]);

        let mut vols = vec![1e-3; 56];
        vols[0] = 0.4;
        let s = SurfaceGrid::new(g.clone(), vols).unwrap();
        assert_eq!(s.flatten()[0], 0.4);
        assert_eq!(s.vol(0, 0), 0.4);
        assert_eq!(s.rows()[0][0], 0.4);
    }

    #[test]
    fn surface_positivity() {
        let g = GridSpec::canonical();
        let mut vols = vec![0.2; 56];
        vols[7] = 0.0;
        assert!(matches!(SurfaceGrid::new(g.clone(), vols), Err(Error::Validation(_))));
        assert!(SurfaceGrid::new(g, vec![0.2; 55]).is_err());
    }

    #[test]
    fn canonical_known_mask_has_12_points() {
        let g = GridSpec::canonical();
        let mask = known_mask(&g).unwrap();
        assert_eq!(mask.iter().filter(|b| **b).count(), 12);
        assert_eq!(mask.iter().filter(|b| !**b).count(), 44);
        assert!(mask[g.index(0, 3)]);
        assert!(!mask[g.index(4, 3)]);
        assert!(!mask[g.index(0, 0)]);
    }

    #[test]
    fn full_mask_and_unknown_values() {
        let g = GridSpec::canonical();
        let all = subset_mask(&g, &CANONICAL_TERMS, &CANONICAL_MONEYNESS).unwrap();
        assert!(all.iter().all(|b| *b));
        let err = subset_mask(&g, &[5.0], &[1.0]).unwrap_err();
        assert!(err.to_string().contains('5'));
        assert!(subset_mask(&g, &[3.0], &[0.97]).is_err());
    }

    #[test]
    fn load_complete_surface() {
        let vols: Vec<f64> = (0..56).map(|k| 0.2 + k as f64 * 1e-3).collect();
        let c = read_corpus(csv_for(&vols, None).as_bytes()).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.records()[0].surface.as_slice(), vols.as_slice());
        assert_eq!(c.grid().unwrap(), &GridSpec::canonical());
    }

    #[test]
    fn load_rejects_partial_surface() {
        let vols = vec![0.2; 56];
        let err = read_corpus(csv_for(&vols, Some(10)).as_bytes()).unwrap_err();
        match err {
            Error::MissingPoint {
                symbol,
                term_months,
                moneyness,
                ..
            } => {
                assert_eq!(symbol, "IDX");
                assert_eq!((term_months, moneyness), GridSpec::canonical().point(10));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_rejects_negative_vol() {
        let mut vols = vec![0.2; 56];
        vols[3] = -0.1;
        let err = read_corpus(csv_for(&vols, None).as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn load_rejects_bad_header() {
        let err = read_corpus("a,b\n1,2\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn duplicate_records_rejected() {
        let g = GridSpec::canonical();
        let rec = SurfaceRecord {
            date: date("2020-01-02"),
            symbol: "A".into(),
            surface: SurfaceGrid::new(g, vec![0.2; 56]).unwrap(),
            stress: false,
        };
        assert!(Corpus::new(vec![rec.clone(), rec], date("2020-06-01")).is_err());
    }

    #[test]
    fn train_test_split_by_date() {
        let g = GridSpec::canonical();
        let mk = |d: &str| SurfaceRecord {
            date: date(d),
            symbol: "A".into(),
            surface: SurfaceGrid::new(g.clone(), vec![0.2; 56]).unwrap(),
            stress: false,
        };
        let c = Corpus::new(vec![mk("2020-01-03"), mk("2020-01-02"), mk("2020-02-01")], date("2020-02-01")).unwrap();
        assert_eq!(c.train().count(), 2);
        assert_eq!(c.test().count(), 1);
        assert_eq!(c.records()[0].date, date("2020-01-02"));
    }

    fn arb_vols() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(1e-4f64..3.0, 56)
    }

    proptest! {
        #[test]
        fn flatten_roundtrip(vols in arb_vols()) {
            let g = GridSpec::canonical();
            let s = SurfaceGrid::new(g.clone(), vols).unwrap();
            prop_assert_eq!(SurfaceGrid::unflatten(&g, &s.flatten()).unwrap(), s);
        }

        #[test]
        fn csv_roundtrip(a in arb_vols(), b in arb_vols(), stress in any::<bool>()) {
            let g = GridSpec::canonical();
            let recs = vec![
                SurfaceRecord { date: date("2021-05-03"), symbol: "IDX".into(), surface: SurfaceGrid::new(g.clone(), a).unwrap(), stress },
                SurfaceRecord { date: date("2021-05-03"), symbol: "S01".into(), surface: SurfaceGrid::new(g.clone(), b).unwrap(), stress: false },
            ];
            let corpus = Corpus::new(recs, date("2021-05-04")).unwrap();
            let mut buf = Vec::new();
            write_records(corpus.records(), &mut buf).unwrap();
            let back = read_corpus(buf.as_slice()).unwrap();
            prop_assert_eq!(back.len(), 2);
            for (x, y) in corpus.records().iter().zip(back.records()) {
                prop_assert_eq!(&x.symbol, &y.symbol);
                prop_assert_eq!(x.stress, y.stress);
                prop_assert_eq!(x.surface.as_slice(), y.surface.as_slice());
            }
        }
    }
}
