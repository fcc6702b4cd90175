//! Versioned JSON checkpoint for [`VaeModel`]. The layout is documented in
//! `docs/checkpoint-format.md`; bump [`FORMAT_VERSION`] on any incompatible change.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::neural::{Activation, Dense, DenseNet};
use crate::surface::GridSpec;
use crate::vae::{CovPenalty, VaeConfig, VaeModel};

pub const FORMAT_NAME: &str = "volenc-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GridDoc {
    terms: Vec<f64>,
    moneyness: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerDoc {
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NetworksDoc {
    encoder: Vec<LayerDoc>,
    mu_head: Vec<LayerDoc>,
    log_sigma_head: Vec<LayerDoc>,
    decoder: Vec<LayerDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HyperDoc {
    latent_dim: usize,
    lambda_kl: f64,
    lambda_cov: f64,
    cov_penalty: CovPenalty,
    recon_scale: f64,
    seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointDoc {
    format: String,
    version: u32,
    grid: GridDoc,
    hyper: HyperDoc,
    prepared: bool,
    input_shift: Vec<f64>,
    input_scale: Vec<f64>,
    networks: NetworksDoc,
}

fn bad(field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        field: field.into(),
        reason: reason.into(),
    }
}

fn layer_docs(net: &DenseNet) -> Vec<LayerDoc> {
    net.layers()
        .iter()
        .map(|l| LayerDoc {
            in_dim: l.in_dim,
            out_dim: l.out_dim,
            activation: l.activation,
            weights: l.weights.clone(),
            bias: l.bias.clone(),
        })
        .collect()
}

/// Serializes a model to checkpoint JSON.
pub fn to_json(model: &VaeModel) -> Result<String> {
    let (shift, scale, [enc, mu, ls, dec]) = model.parts();
    let cfg = model.config();
    let doc = CheckpointDoc {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        grid: GridDoc {
            terms: model.grid().terms().to_vec(),
            moneyness: model.grid().moneyness().to_vec(),
        },
        hyper: HyperDoc {
            latent_dim: cfg.latent_dim,
            lambda_kl: cfg.lambda_kl,
            lambda_cov: cfg.lambda_cov,
            cov_penalty: cfg.cov_penalty,
            recon_scale: cfg.recon_scale,
            seed: cfg.seed,
        },
        prepared: model.is_prepared(),
        input_shift: shift.to_vec(),
        input_scale: scale.to_vec(),
        networks: NetworksDoc {
            encoder: layer_docs(enc),
            mu_head: layer_docs(mu),
            log_sigma_head: layer_docs(ls),
            decoder: layer_docs(dec),
        },
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn save_model(model: &VaeModel, path: &Path) -> Result<()> {
    let mut text = to_json(model)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<VaeModel> {
    from_json(&fs::read_to_string(path)?)
}

/// Parses and validates checkpoint JSON. Every failure names the offending field.
pub fn from_json(text: &str) -> Result<VaeModel> {
    let raw: Value = serde_json::from_str(text).map_err(|e| bad("<document>", e.to_string()))?;
    let obj = raw.as_object().ok_or_else(|| bad("<document>", "expected a JSON object"))?;
    match obj.get("format").and_then(Value::as_str) {
        Some(FORMAT_NAME) => {}
        Some(other) => return Err(bad("format", format!("expected `{FORMAT_NAME}`, found `{other}`"))),
        None => return Err(bad("format", "missing or not a string")),
    }
    match obj.get("version").and_then(Value::as_u64) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => return Err(bad("version", format!("unsupported version {v}, expected {FORMAT_VERSION}"))),
        None => return Err(bad("version", "missing or not an unsigned integer")),
    }
    // Decode section by section so a type error points at the field that carries it.
    let field = |name: &str| obj.get(name).cloned().ok_or_else(|| bad(name, "missing"));
    let grid: GridDoc = serde_json::from_value(field("grid")?).map_err(|e| bad("grid", e.to_string()))?;
    let hyper: HyperDoc = serde_json::from_value(field("hyper")?).map_err(|e| bad("hyper", e.to_string()))?;
    let prepared: bool = serde_json::from_value(field("prepared")?).map_err(|e| bad("prepared", e.to_string()))?;
    let input_shift: Vec<f64> =
        serde_json::from_value(field("input_shift")?).map_err(|e| bad("input_shift", e.to_string()))?;
    let input_scale: Vec<f64> =
        serde_json::from_value(field("input_scale")?).map_err(|e| bad("input_scale", e.to_string()))?;
    let networks: NetworksDoc =
        serde_json::from_value(field("networks")?).map_err(|e| bad("networks", e.to_string()))?;

    let grid = GridSpec::new(grid.terms, grid.moneyness).map_err(|e| bad("grid", e.to_string()))?;
    let n = grid.len();
    let d = hyper.latent_dim;
    if d == 0 {
        return Err(bad("hyper.latent_dim", "must be positive"));
    }
    for (name, v) in [("hyper.lambda_kl", hyper.lambda_kl), ("hyper.lambda_cov", hyper.lambda_cov)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(bad(name, format!("must be finite and non-negative, found {v}")));
        }
    }
    if !(hyper.recon_scale.is_finite() && hyper.recon_scale > 0.0) {
        return Err(bad("hyper.recon_scale", "must be finite and positive"));
    }
    check_vector("input_shift", &input_shift, n, false)?;
    check_vector("input_scale", &input_scale, n, true)?;

    let encoder = build_net("networks.encoder", networks.encoder, Some(n), None)?;
    let hidden = encoder.output_dim();
    let mu_head = build_net("networks.mu_head", networks.mu_head, Some(hidden), Some(d))?;
    let log_sigma_head = build_net("networks.log_sigma_head", networks.log_sigma_head, Some(hidden), Some(d))?;
    let decoder = build_net("networks.decoder", networks.decoder, Some(d), Some(n))?;
    if decoder.layers().last().map(|l| l.activation) != Some(Activation::Softplus) {
        return Err(bad("networks.decoder", "last layer must use softplus"));
    }

    let cfg = VaeConfig {
        latent_dim: d,
        lambda_kl: hyper.lambda_kl,
        lambda_cov: hyper.lambda_cov,
        cov_penalty: hyper.cov_penalty,
        recon_scale: hyper.recon_scale,
        seed: hyper.seed,
    };
    Ok(VaeModel::from_parts(
        grid,
        cfg,
        prepared,
        input_shift,
        input_scale,
        encoder,
        mu_head,
        log_sigma_head,
        decoder,
    ))
}

fn check_vector(name: &str, v: &[f64], n: usize, positive: bool) -> Result<()> {
    if v.len() != n {
        return Err(bad(name, format!("expected {n} entries, found {}", v.len())));
    }
    if let Some(x) = v.iter().find(|x| !x.is_finite() || (positive && **x <= 0.0)) {
        return Err(bad(name, format!("invalid entry {x}")));
    }
    Ok(())
}

fn build_net(name: &str, docs: Vec<LayerDoc>, input: Option<usize>, output: Option<usize>) -> Result<DenseNet> {
    if docs.is_empty() {
        return Err(bad(name, "no layers"));
    }
    let mut layers = Vec::with_capacity(docs.len());
    let mut prev = input;
    for (i, l) in docs.into_iter().enumerate() {
        let at = format!("{name}[{i}]");
        if let Some(p) = prev {
            if l.in_dim != p {
                return Err(bad(format!("{at}.in_dim"), format!("expected {p}, found {}", l.in_dim)));
            }
        }
        if l.weights.iter().chain(&l.bias).any(|x| !x.is_finite()) {
            return Err(bad(at, "non-finite parameter"));
        }
        prev = Some(l.out_dim);
        layers.push(Dense::new(l.in_dim, l.out_dim, l.weights, l.bias, l.activation).map_err(|e| bad(at, e.to_string()))?);
    }
    if let (Some(want), Some(got)) = (output, prev) {
        if want != got {
            return Err(bad(format!("{name}.out_dim"), format!("expected {want}, found {got}")));
        }
    }
    DenseNet::new(layers).map_err(|e| bad(name, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vae::VaeConfig;

    fn model(d: usize) -> VaeModel {
        let cfg = VaeConfig {
            latent_dim: d,
            ..VaeConfig::pca(5)
        };
        let mut m = VaeModel::new(GridSpec::canonical(), cfg).unwrap();
        let data: Vec<Vec<f64>> = (0..4).map(|i| vec![0.2 + 0.01 * i as f64; 56]).collect();
        m.prepare(&data).unwrap();
        let p: Vec<f64> = m.params().iter().enumerate().map(|(i, v)| v + (i as f64 * 0.37).sin() * 0.1).collect();
        m.set_params(&p).unwrap();
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model(3);
        let back = from_json(&to_json(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.params(), m.params());
        assert_eq!(back.config(), m.config());
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model(3);
        save_model(&m, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), m);
    }

    #[test]
    fn four_dimensional_model_loads() {
        let m = from_json(&to_json(&model(4)).unwrap()).unwrap();
        assert_eq!(m.latent_dim(), 4);
    }

    fn tamper(text: &str, f: impl FnOnce(&mut Value)) -> String {
        let mut v: Value = serde_json::from_str(text).unwrap();
        f(&mut v);
        v.to_string()
    }

    fn field_of(err: Error) -> String {
        match err {
            Error::Checkpoint { field, .. } => field,
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn tampered_dimension_names_field() {
        let text = to_json(&model(3)).unwrap();
        let t = tamper(&text, |v| v["hyper"]["latent_dim"] = 4.into());
        assert_eq!(field_of(from_json(&t).unwrap_err()), "networks.mu_head.out_dim");
        let t = tamper(&text, |v| v["networks"]["decoder"][1]["in_dim"] = 17.into());
        assert_eq!(field_of(from_json(&t).unwrap_err()), "networks.decoder[1].in_dim");
    }

    #[test]
    fn version_and_format_checked() {
        let text = to_json(&model(3)).unwrap();
        let t = tamper(&text, |v| v["version"] = 99.into());
        assert_eq!(field_of(from_json(&t).unwrap_err()), "version");
        let t = tamper(&text, |v| v["format"] = "other".into());
        assert_eq!(field_of(from_json(&t).unwrap_err()), "format");
        let t = tamper(&text, |v| {
            v.as_object_mut().unwrap().remove("input_scale");
        });
        assert_eq!(field_of(from_json(&t).unwrap_err()), "input_scale");
        assert_eq!(field_of(from_json("not json").unwrap_err()), "<document>");
    }

    #[test]
    fn truncated_weights_rejected() {
        let text = to_json(&model(3)).unwrap();
        let t = tamper(&text, |v| {
            v["networks"]["encoder"][0]["weights"].as_array_mut().unwrap().pop();
        });
        assert_eq!(field_of(from_json(&t).unwrap_err()), "networks.encoder[0]");
    }
}
