use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use volenc_core::checkpoint::{load_model, save_model};
use volenc_core::evaluation::ThresholdTable;
use volenc_core::extrapolate::{evaluate_extrapolation, write_extrapolation_table, ExtrapolationOptions};
use volenc_core::latent::{
    encode_corpus, evaluate_reconstruction, latent_correlations, linspace, match_factors, scenario_sweep,
    stress_contrast, write_correlations, write_encodings, write_reconstruction_table, write_sweep,
    CorrelationReport, FactorMatch, SweepConfig,
};
use volenc_core::stock::{evaluate_inference, write_inference_table, MIN_WINDOW};
use volenc_core::surface::{format_vol, load_corpus, save_corpus, subset_mask, Corpus};
use volenc_core::synth::{default_stocks, generate_corpus, load_prices, save_prices, SynthConfig};
use volenc_core::vae::{train, TrainConfig, VaeConfig, VaeModel};
use volenc_server::AppState;

use crate::args::*;
use crate::manifest::{manifest_path, ManifestBuilder};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<volenc_core::Error> for CliError {
    fn from(e: volenc_core::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> CliResult<()> {
    if cond {
        Ok(())
    } else {
        Err(invalid(msg()))
    }
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    ensure(path.is_file(), || format!("{what} file `{}` does not exist", path.display()))
}

fn require_output(path: &Path) -> CliResult<()> {
    ensure(!path.is_dir(), || format!("output `{}` is a directory", path.display()))?;
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => {
            Err(invalid(format!("output directory `{}` does not exist", dir.display())))
        }
        _ => Ok(()),
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Runtime(format!("cannot write `{}`: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Runtime(e.to_string()))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| CliError::Runtime(e.to_string()))
}

fn finish(manifest: ManifestBuilder, primary: &Path) -> CliResult<()> {
    write_json(&manifest_path(primary), &manifest.finish())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

fn corpus(args: &CorpusArgs) -> CliResult<Corpus> {
    let c = load_corpus(&args.corpus)?;
    ensure(!c.is_empty(), || format!("corpus `{}` has no records", args.corpus.display()))?;
    Ok(match args.split_date {
        Some(d) => c.with_split_date(d),
        None => c,
    })
}

fn model_for(arg: &ModelArg, corpus: Option<&Corpus>) -> CliResult<VaeModel> {
    let m = load_model(&arg.model)?;
    if let Some(g) = corpus.and_then(Corpus::grid) {
        m.grid().ensure_matches(g)?;
    }
    Ok(m)
}

fn thresholds(path: &Option<PathBuf>) -> CliResult<ThresholdTable> {
    match path {
        Some(p) => {
            require_file(p, "threshold")?;
            Ok(ThresholdTable::load(p)?)
        }
        None => Ok(ThresholdTable::canonical()),
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let name = cli.command.name();
    match cli.command {
        Command::SynthData(a) => synth_data(name, a),
        Command::Train(a) => train_cmd(name, a),
        Command::Encode(a) => encode(name, a),
        Command::Diagnose(a) => diagnose(name, a),
        Command::Sweep(a) => sweep(name, a),
        Command::Extrapolate(a) => extrapolate(name, a),
        Command::InferStock(a) => infer_stock(name, a),
        Command::Evaluate(a) => evaluate(name, a),
        Command::Serve(a) => serve(a),
    }
}

fn synth_data(name: &str, a: SynthArgs) -> CliResult<()> {
    ensure(a.stocks >= 1, || "--stocks must be at least 1".into())?;
    let prices = a.prices.clone().unwrap_or_else(|| a.out.with_file_name("prices.csv"));
    require_output(&a.out)?;
    require_output(&prices)?;
    ensure(prices != a.out, || "--prices must differ from --out".into())?;
    let mut manifest = ManifestBuilder::new(name, &a).seed("synth", a.seed);

    let mut cfg = SynthConfig::desk(a.seed);
    cfg.n_stocks = a.stocks;
    let out = generate_corpus(&cfg, &default_stocks(&cfg))?;
    save_corpus(&out.corpus, &a.out)?;
    save_prices(&out.prices, &prices)?;
    println!(
        "{} surfaces over {} dates, test split from {}",
        out.corpus.len(),
        out.dates.len(),
        out.corpus.split_date()
    );
    manifest.output(&a.out);
    manifest.output(&prices);
    finish(manifest, &a.out)
}

fn train_cmd(name: &str, a: TrainArgs) -> CliResult<()> {
    ensure(a.epochs >= 1, || "--epochs must be at least 1".into())?;
    ensure(a.latent_dim >= 1, || "--latent-dim must be at least 1".into())?;
    ensure(a.batch_size >= 2, || "--batch-size must be at least 2".into())?;
    for (flag, v) in [("--lambda-cov", a.lambda_cov), ("--lambda-kl", a.lambda_kl)] {
        ensure(v.is_finite() && v >= 0.0, || format!("{flag} must be non-negative, got {v}"))?;
    }
    for (flag, v) in [("--recon-scale", a.recon_scale), ("--learning-rate", a.learning_rate)] {
        ensure(v.is_finite() && v > 0.0, || format!("{flag} must be positive, got {v}"))?;
    }
    require_file(&a.corpus.corpus, "corpus")?;
    require_output(&a.out)?;
    let history = a.history.clone().unwrap_or_else(|| sibling(&a.out, ".history.csv"));
    require_output(&history)?;
    let mut manifest = ManifestBuilder::new(name, &a)
        .seed("init", a.init_seed)
        .seed("train", a.seed)
        .input(&a.corpus.corpus);

    let corpus = corpus(&a.corpus)?;
    let grid = corpus.grid().expect("non-empty corpus has a grid").clone();
    let cfg = VaeConfig {
        latent_dim: a.latent_dim,
        lambda_kl: a.lambda_kl,
        lambda_cov: a.lambda_cov,
        cov_penalty: a.cov_penalty.into(),
        recon_scale: a.recon_scale,
        seed: a.init_seed,
    };
    let tc = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        seed: a.seed,
        shuffle: true,
    };
    let (model, hist) = train(&VaeModel::new(grid, cfg)?, &corpus, &tc)?;
    save_model(&model, &a.out)?;

    let mut w = create(&history)?;
    let io = |e: std::io::Error| CliError::Runtime(format!("cannot write `{}`: {e}", history.display()));
    writeln!(w, "epoch,total,recon,kl,cov,cov_signed,mean_sigma").map_err(io)?;
    for h in &hist {
        let l = &h.loss;
        let cols = [l.total, l.recon, l.kl, l.cov, l.cov_signed, h.mean_sigma].map(format_vol);
        writeln!(w, "{},{}", h.epoch, cols.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)?;
    if let Some(last) = hist.last() {
        println!(
            "epoch {}: recon {:.6} kl {:.4} cov {:.6}",
            last.epoch, last.loss.recon, last.loss.kl, last.loss.cov
        );
    }
    manifest.output(&a.out);
    manifest.output(&history);
    finish(manifest, &a.out)
}

fn encode(name: &str, a: EncodeArgs) -> CliResult<()> {
    require_file(&a.model.model, "model")?;
    require_file(&a.corpus.corpus, "corpus")?;
    require_output(&a.out)?;
    let mut manifest = ManifestBuilder::new(name, &a).input(&a.model.model).input(&a.corpus.corpus);
    let corpus = corpus(&a.corpus)?;
    let model = model_for(&a.model, Some(&corpus))?;
    let enc = encode_corpus(&model, &corpus)?;
    write_encodings(&enc, create(&a.out)?)?;
    manifest.output(&a.out);
    finish(manifest, &a.out)
}

#[derive(Serialize)]
struct StressContrast {
    stress_mean: f64,
    normal_mean: f64,
}

#[derive(Serialize)]
struct DiagnoseReport {
    latent_dim: usize,
    split_date: chrono::NaiveDate,
    test_correlations: CorrelationReport,
    all_correlations: CorrelationReport,
    factor_match: Option<FactorMatch>,
    #[serde(skip_serializing_if = "Option::is_none")]
    factor_match_error: Option<String>,
    /// Oriented level latent over stress and normal dates.
    stress_contrast: Option<StressContrast>,
}

fn diagnose(name: &str, a: DiagnoseArgs) -> CliResult<()> {
    require_file(&a.model.model, "model")?;
    require_file(&a.corpus.corpus, "corpus")?;
    require_output(&a.out)?;
    let corr_path = a.correlations.clone().unwrap_or_else(|| sibling(&a.out, ".correlations.csv"));
    require_output(&corr_path)?;
    let mut manifest = ManifestBuilder::new(name, &a).input(&a.model.model).input(&a.corpus.corpus);
    let corpus = corpus(&a.corpus)?;
    let model = model_for(&a.model, Some(&corpus))?;
    let enc = encode_corpus(&model, &corpus)?;
    let test_correlations = latent_correlations(&enc.from_date(corpus.split_date()))?;
    let all_correlations = latent_correlations(&enc)?;
    let (factor_match, factor_match_error) = match match_factors(&model, &SweepConfig::standard(model.latent_dim())) {
        Ok(fm) => (Some(fm), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let stress = factor_match
        .as_ref()
        .and_then(|fm| stress_contrast(&enc, fm))
        .map(|(stress_mean, normal_mean)| StressContrast {
            stress_mean,
            normal_mean,
        });
    println!("test max |corr| {:.4}", test_correlations.max_abs_off_diagonal());
    match &factor_match {
        Some(fm) => println!(
            "roles {} dominance {:.3}",
            fm.roles.iter().map(|r| r.name()).collect::<Vec<_>>().join(","),
            fm.dominance
        ),
        None => println!("roles unavailable: {}", factor_match_error.as_deref().unwrap_or("")),
    }
    write_correlations(&test_correlations, create(&corr_path)?)?;
    let report = DiagnoseReport {
        latent_dim: model.latent_dim(),
        split_date: corpus.split_date(),
        test_correlations,
        all_correlations,
        factor_match,
        factor_match_error,
        stress_contrast: stress,
    };
    write_json(&a.out, &report)?;
    manifest.output(&a.out);
    manifest.output(&corr_path);
    finish(manifest, &a.out)
}

fn sweep(name: &str, a: SweepArgs) -> CliResult<()> {
    require_file(&a.model.model, "model")?;
    require_output(&a.out)?;
    ensure(a.steps >= 1, || "--steps must be at least 1".into())?;
    ensure(a.from.is_finite() && a.to.is_finite(), || "--from and --to must be finite".into())?;
    let mut manifest = ManifestBuilder::new(name, &a).input(&a.model.model);
    let model = model_for(&a.model, None)?;
    let d = model.latent_dim();
    ensure((1..=d).contains(&a.dim), || format!("--dim must be between 1 and {d}, got {}", a.dim))?;
    let base = a.base.clone().unwrap_or_else(|| vec![0.0; d]);
    ensure(base.len() == d, || format!("--base needs {d} values, got {}", base.len()))?;
    let values = linspace(a.from, a.to, a.steps);
    let surfaces = scenario_sweep(&model, &base, a.dim - 1, &values)?;
    write_sweep(&surfaces, a.dim - 1, &values, a.date, create(&a.out)?)?;
    manifest.output(&a.out);
    finish(manifest, &a.out)
}

fn extrapolate(name: &str, a: ExtrapolateArgs) -> CliResult<()> {
    require_file(&a.model.model, "model")?;
    require_file(&a.corpus.corpus, "corpus")?;
    require_output(&a.out)?;
    ensure(a.starts >= 1, || "--starts must be at least 1".into())?;
    ensure(!a.known_terms.is_empty() && !a.known_moneyness.is_empty(), || {
        "--known-terms and --known-moneyness need at least one value each".into()
    })?;
    let table = thresholds(&a.thresholds)?;
    let mut manifest = ManifestBuilder::new(name, &a)
        .seed("starts", a.seed)
        .input(&a.model.model)
        .input(&a.corpus.corpus);
    let corpus = corpus(&a.corpus)?;
    let model = model_for(&a.model, Some(&corpus))?;
    let mask = subset_mask(model.grid(), &a.known_terms, &a.known_moneyness)?;
    let opts = ExtrapolationOptions {
        starts: a.starts,
        seed: a.seed,
        ..ExtrapolationOptions::default()
    };
    let result = evaluate_extrapolation(&model, &corpus, &mask, &table, &opts)?;
    write_extrapolation_table(&result, create(&a.out)?)?;
    let o = &result.overall;
    println!(
        "{} surfaces: satisfaction {:.4}, mae known {:.6}, unknown {:.6}, unconverged {}",
        o.surfaces, o.satisfaction, o.mae_known, o.mae_unknown, o.unconverged
    );
    manifest.output(&a.out);
    finish(manifest, &a.out)
}

fn infer_stock(name: &str, a: InferStockArgs) -> CliResult<()> {
    require_file(&a.model.model, "model")?;
    require_file(&a.corpus.corpus, "corpus")?;
    require_file(&a.prices, "prices")?;
    require_output(&a.out)?;
    ensure(a.window >= MIN_WINDOW, || format!("--window must be at least {MIN_WINDOW}, got {}", a.window))?;
    let table = thresholds(&a.thresholds)?;
    let mut manifest = ManifestBuilder::new(name, &a)
        .input(&a.model.model)
        .input(&a.corpus.corpus)
        .input(&a.prices);
    let corpus = corpus(&a.corpus)?;
    let model = model_for(&a.model, Some(&corpus))?;
    let prices = load_prices(&a.prices)?;
    let result = evaluate_inference(&model, &corpus, &prices, a.window, &table)?;
    write_inference_table(&result, create(&a.out)?)?;
    println!("{} stocks: mean satisfaction {:.4}", result.rows.len(), result.mean_satisfaction());
    manifest.output(&a.out);
    finish(manifest, &a.out)
}

fn evaluate(name: &str, a: EvaluateArgs) -> CliResult<()> {
    require_file(&a.model.model, "model")?;
    require_file(&a.corpus.corpus, "corpus")?;
    require_output(&a.out)?;
    let table = thresholds(&a.thresholds)?;
    let mut manifest = ManifestBuilder::new(name, &a).input(&a.model.model).input(&a.corpus.corpus);
    let corpus = corpus(&a.corpus)?;
    let model = model_for(&a.model, Some(&corpus))?;
    let result = if a.all {
        evaluate_reconstruction(&model, corpus.records(), &table)?
    } else {
        let test: Vec<_> = corpus.test().collect();
        ensure(!test.is_empty(), || format!("no test records on or after {}", corpus.split_date()))?;
        evaluate_reconstruction(&model, test, &table)?
    };
    write_reconstruction_table(&result, create(&a.out)?)?;
    println!("satisfaction {:.4}, mae {:.6}", result.overall.rate, result.overall.mae);
    manifest.output(&a.out);
    finish(manifest, &a.out)
}

fn serve(a: ServeArgs) -> CliResult<()> {
    require_file(&a.model.model, "model")?;
    let table = thresholds(&a.thresholds)?;
    let model = model_for(&a.model, None)?;
    let state = Arc::new(AppState::new(model, &table));
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Runtime(format!("cannot start runtime: {e}")))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port))
            .await
            .map_err(|e| CliError::Runtime(format!("cannot bind {}:{}: {e}", a.host, a.port)))?;
        let addr = listener.local_addr().map_err(|e| CliError::Runtime(e.to_string()))?;
        println!("listening on http://{addr}");
        std::io::stdout().flush().ok();
        volenc_server::serve(listener, state)
            .await
            .map_err(|e| CliError::Runtime(format!("server failed: {e}")))
    })
}
