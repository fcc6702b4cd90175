//! JSON bodies exchanged between the serve mode and its clients.
//!
//! Surfaces travel as `vols[term][moneyness]` in the order of `grid`.

use serde::{Deserialize, Serialize};

use crate::evaluation::{ThresholdTable, MONEYNESS_EDGES, TERM_EDGES};
use crate::surface::{GridSpec, SurfaceGrid};
use crate::vae::CovPenalty;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDoc {
    pub terms: Vec<f64>,
    pub moneyness: Vec<f64>,
}

impl From<&GridSpec> for GridDoc {
    fn from(g: &GridSpec) -> Self {
        Self {
            terms: g.terms().to_vec(),
            moneyness: g.moneyness().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    #[serde(rename = "D")]
    pub latent_dim: usize,
    pub grid: GridDoc,
    pub lambda_kl: f64,
    pub lambda_cov: f64,
    pub recon_scale: f64,
    pub cov_penalty: CovPenalty,
    pub checkpoint_version: u32,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Inclusive upper edges of the first two term buckets, in months.
    pub term_edges: [f64; 2],
    pub moneyness_edges: [f64; 2],
    /// Rows are term buckets, columns moneyness buckets.
    pub values: [[f64; 3]; 3],
}

impl From<&ThresholdTable> for Thresholds {
    fn from(t: &ThresholdTable) -> Self {
        Self {
            term_edges: TERM_EDGES,
            moneyness_edges: MONEYNESS_EDGES,
            values: t.values,
        }
    }
}

/// Factor roles of each latent, for labelling sliders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Role name per latent dimension.
    pub roles: Vec<String>,
    /// Sign that makes each latent move its role's statistic upwards.
    pub signs: Vec<i8>,
    pub dominance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRequest {
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDoc {
    pub grid: GridDoc,
    pub vols: Vec<Vec<f64>>,
}

impl From<&SurfaceGrid> for SurfaceDoc {
    fn from(s: &SurfaceGrid) -> Self {
        Self {
            grid: s.grid().into(),
            vols: s.rows(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeRequest {
    pub vols: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeResponse {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

/// `values` entries at mask-false points are ignored and may be null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolateRequest {
    pub mask: Vec<Vec<bool>>,
    pub values: Vec<Vec<Option<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub starts: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolateResponse {
    pub z_hat: Vec<f64>,
    pub grid: GridDoc,
    pub vols: Vec<Vec<f64>>,
    pub objective: f64,
    pub mae_known: f64,
    pub iterations: usize,
    pub converged: bool,
    pub best_start: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    /// Path of the offending request field, when one is to blame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}
