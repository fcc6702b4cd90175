use std::path::PathBuf;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use volenc_core::surface::{KNOWN_MONEYNESS, KNOWN_TERMS};
use volenc_core::vae::{CovPenalty, CANONICAL_LAMBDA_COV, CANONICAL_LATENT_DIM, DEFAULT_LAMBDA_KL, DEFAULT_RECON_SCALE};

/// Environment variable read when `--model` is not given.
pub const MODEL_ENV: &str = "VOLENC_MODEL";

#[derive(Debug, Parser)]
#[command(name = "volenc", version, about = "Latent encoding of implied-volatility surfaces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic surface corpus and close prices.
    SynthData(SynthArgs),
    /// Train a model on the corpus training split and write a checkpoint.
    Train(TrainArgs),
    /// Encode every corpus surface to its latent mean and log-sigma.
    Encode(EncodeArgs),
    /// Latent correlations, factor roles and stress contrast as JSON.
    Diagnose(DiagnoseArgs),
    /// Decode a one-dimensional latent sweep.
    Sweep(SweepArgs),
    /// Complete test-split surfaces from a known subset of points.
    Extrapolate(ExtrapolateArgs),
    /// Walk-forward single-stock surface inference from the index.
    InferStock(InferStockArgs),
    /// Reconstruction satisfaction per symbol.
    Evaluate(EvaluateArgs),
    /// Serve the model over HTTP.
    Serve(ServeArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthData(_) => "synth-data",
            Command::Train(_) => "train",
            Command::Encode(_) => "encode",
            Command::Diagnose(_) => "diagnose",
            Command::Sweep(_) => "sweep",
            Command::Extrapolate(_) => "extrapolate",
            Command::InferStock(_) => "infer-stock",
            Command::Evaluate(_) => "evaluate",
            Command::Serve(_) => "serve",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyArg {
    Absolute,
    Signed,
}

impl From<PenaltyArg> for CovPenalty {
    fn from(p: PenaltyArg) -> Self {
        match p {
            PenaltyArg::Absolute => CovPenalty::Absolute,
            PenaltyArg::Signed => CovPenalty::Signed,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CorpusArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// First test date; defaults to the date at 80% of the corpus dates.
    #[arg(long)]
    pub split_date: Option<NaiveDate>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArg {
    #[arg(long, env = MODEL_ENV)]
    pub model: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub stocks: usize,
    /// Corpus CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Price CSV to write; defaults to `prices.csv` beside the corpus.
    #[arg(long)]
    pub prices: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = CANONICAL_LATENT_DIM)]
    pub latent_dim: usize,
    #[arg(long, default_value_t = CANONICAL_LAMBDA_COV)]
    pub lambda_cov: f64,
    #[arg(long, default_value_t = DEFAULT_LAMBDA_KL)]
    pub lambda_kl: f64,
    #[arg(long, default_value_t = DEFAULT_RECON_SCALE)]
    pub recon_scale: f64,
    #[arg(long, value_enum, default_value_t = PenaltyArg::Absolute)]
    pub cov_penalty: PenaltyArg,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    /// Seed for weight initialization.
    #[arg(long, default_value_t = 1)]
    pub init_seed: u64,
    /// Seed for shuffling and reparameterization noise.
    #[arg(long, default_value_t = 11)]
    pub seed: u64,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss-history CSV; defaults to `<out>.history.csv`.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EncodeArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// JSON report to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Test-split correlation matrix CSV; defaults to `<out>.correlations.csv`.
    #[arg(long)]
    pub correlations: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub model: ModelArg,
    /// Latent to sweep, counted from 1.
    #[arg(long)]
    pub dim: usize,
    #[arg(long, default_value_t = -2.0, allow_hyphen_values = true)]
    pub from: f64,
    #[arg(long, default_value_t = 2.0, allow_hyphen_values = true)]
    pub to: f64,
    #[arg(long, default_value_t = 21)]
    pub steps: usize,
    /// Base latent vector, comma separated; zeros by default.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub base: Option<Vec<f64>>,
    /// Date stamped on the output rows.
    #[arg(long, default_value = "2000-01-03")]
    pub date: NaiveDate,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ExtrapolateArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, value_delimiter = ',', default_values_t = KNOWN_TERMS)]
    pub known_terms: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = KNOWN_MONEYNESS)]
    pub known_moneyness: Vec<f64>,
    #[arg(long, default_value_t = 8)]
    pub starts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// 3x3 threshold CSV overriding the compiled-in table.
    #[arg(long)]
    pub thresholds: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct InferStockArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub prices: PathBuf,
    /// Trailing regression window in trading days.
    #[arg(long, default_value_t = volenc_core::stock::DEFAULT_WINDOW)]
    pub window: usize,
    #[arg(long)]
    pub thresholds: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub thresholds: Option<PathBuf>,
    /// Score every record instead of the test split only.
    #[arg(long)]
    pub all: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ServeArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// 0 picks a free port; the bound address is printed on stdout.
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long)]
    pub thresholds: Option<PathBuf>,
}
