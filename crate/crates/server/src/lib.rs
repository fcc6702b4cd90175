//! HTTP serve mode: JSON endpoints over one immutable trained model.
//!
//! | method | path            | body                   |
//! |--------|-----------------|------------------------|
//! | GET    | `/health`       |                        |
//! | GET    | `/model/meta`   |                        |
//! | GET    | `/thresholds`   |                        |
//! | GET    | `/diagnostics`  |                        |
//! | POST   | `/decode`       | `{"z": [...]}`         |
//! | POST   | `/encode`       | `{"vols": [[...]]}`    |
//! | POST   | `/extrapolate`  | `{"mask", "values"}`   |
//!
//! Malformed bodies get 400 with the offending field; model failures get 500.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use tokio::net::TcpListener;
use tower_http::cors::CorsLayer;

use volenc_core::checkpoint::FORMAT_VERSION;
use volenc_core::evaluation::ThresholdTable;
use volenc_core::extrapolate::{extrapolate, ExtrapolationOptions, PartialSurface};
use volenc_core::latent::{match_factors, SweepConfig};
use volenc_core::surface::SurfaceGrid;
use volenc_core::vae::VaeModel;
use volenc_core::wire::{
    DecodeRequest, Diagnostics, EncodeRequest, EncodeResponse, ErrorBody, ExtrapolateRequest, ExtrapolateResponse,
    Health, ModelMeta, SurfaceDoc, Thresholds,
};

/// Upper bound on optimizer starts one request may ask for.
pub const MAX_STARTS: usize = 64;

pub struct AppState {
    model: VaeModel,
    meta: ModelMeta,
    thresholds: Thresholds,
    diagnostics: Option<Diagnostics>,
}

impl AppState {
    /// Factor roles are computed once here; models that cannot be matched serve no diagnostics.
    pub fn new(model: VaeModel, table: &ThresholdTable) -> Self {
        let meta = ModelMeta {
            latent_dim: model.latent_dim(),
            grid: model.grid().into(),
            lambda_kl: model.lambda_kl(),
            lambda_cov: model.lambda_cov(),
            recon_scale: model.recon_scale(),
            cov_penalty: model.cov_penalty(),
            checkpoint_version: FORMAT_VERSION,
            version: env!("CARGO_PKG_VERSION").to_string(),
        };
        let diagnostics = match match_factors(&model, &SweepConfig::standard(model.latent_dim())) {
            Ok(fm) => Some(Diagnostics {
                roles: fm.roles.iter().map(|r| r.name().to_string()).collect(),
                signs: fm.signs.clone(),
                dominance: fm.dominance,
            }),
            Err(e) => {
                log::warn!("no factor diagnostics: {e}");
                None
            }
        };
        Self {
            model,
            meta,
            thresholds: table.into(),
            diagnostics,
        }
    }

    pub fn model(&self) -> &VaeModel {
        &self.model
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.meta
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn bad_request(field: impl Into<String>, error: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            body: ErrorBody {
                error: error.into(),
                field: Some(field.into()),
            },
        }
    }

    fn from_core(e: volenc_core::Error) -> Self {
        let status = if e.is_validation() {
            StatusCode::BAD_REQUEST
        } else {
            StatusCode::INTERNAL_SERVER_ERROR
        };
        Self {
            status,
            body: ErrorBody {
                error: e.to_string(),
                field: None,
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "<body>".to_string() } else { path };
        ApiError::bad_request(field, e.into_inner().to_string())
    })
}

/// Checks the `[term][moneyness]` shape of a request grid.
fn check_shape<T>(rows: &[Vec<T>], n_terms: usize, n_m: usize, field: &str) -> Result<(), ApiError> {
    if rows.len() != n_terms {
        return Err(ApiError::bad_request(field, format!("expected {n_terms} term rows, got {}", rows.len())));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != n_m {
            return Err(ApiError::bad_request(
                format!("{field}[{i}]"),
                format!("expected {n_m} moneyness columns, got {}", r.len()),
            ));
        }
    }
    Ok(())
}

fn check_vol(v: f64, field: String) -> Result<f64, ApiError> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(ApiError::bad_request(field, format!("vol must be positive and finite, got {v}")))
    }
}

async fn health() -> Json<Health> {
    Json(Health { status: "ok".into() })
}

async fn meta(State(s): State<Arc<AppState>>) -> Json<ModelMeta> {
    Json(s.meta.clone())
}

async fn thresholds(State(s): State<Arc<AppState>>) -> Json<Thresholds> {
    Json(s.thresholds.clone())
}

async fn diagnostics(State(s): State<Arc<AppState>>) -> Result<Json<Diagnostics>, ApiError> {
    s.diagnostics.clone().map(Json).ok_or(ApiError {
        status: StatusCode::NOT_FOUND,
        body: ErrorBody {
            error: "factor roles are unavailable for this model".into(),
            field: None,
        },
    })
}

async fn decode(State(s): State<Arc<AppState>>, body: Bytes) -> ApiResult<SurfaceDoc> {
    let req: DecodeRequest = parse(&body)?;
    let d = s.model.latent_dim();
    if req.z.len() != d {
        return Err(ApiError::bad_request("z", format!("expected {d} latent values, got {}", req.z.len())));
    }
    let surface = s.model.decode(&req.z).map_err(ApiError::from_core)?;
    Ok(Json((&surface).into()))
}

async fn encode(State(s): State<Arc<AppState>>, body: Bytes) -> ApiResult<EncodeResponse> {
    let req: EncodeRequest = parse(&body)?;
    let g = s.model.grid();
    check_shape(&req.vols, g.n_terms(), g.n_moneyness(), "vols")?;
    let mut flat = Vec::with_capacity(g.len());
    for (i, row) in req.vols.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            flat.push(check_vol(*v, format!("vols[{i}][{j}]"))?);
        }
    }
    let surface = SurfaceGrid::new(g.clone(), flat).map_err(ApiError::from_core)?;
    let code = s.model.encode_surface(&surface).map_err(ApiError::from_core)?;
    Ok(Json(EncodeResponse {
        mu: code.mu,
        log_sigma: code.log_sigma,
    }))
}

async fn extrapolate_handler(State(s): State<Arc<AppState>>, body: Bytes) -> ApiResult<ExtrapolateResponse> {
    let req: ExtrapolateRequest = parse(&body)?;
    let g = s.model.grid().clone();
    check_shape(&req.mask, g.n_terms(), g.n_moneyness(), "mask")?;
    check_shape(&req.values, g.n_terms(), g.n_moneyness(), "values")?;
    let mut mask = Vec::with_capacity(g.len());
    let mut values = Vec::with_capacity(g.len());
    for (i, (mrow, vrow)) in req.mask.iter().zip(&req.values).enumerate() {
        for (j, (&known, v)) in mrow.iter().zip(vrow).enumerate() {
            mask.push(known);
            match (known, v) {
                (true, Some(v)) => values.push(check_vol(*v, format!("values[{i}][{j}]"))?),
                (true, None) => {
                    return Err(ApiError::bad_request(format!("values[{i}][{j}]"), "known point has no value"))
                }
                (false, _) => {}
            }
        }
    }
    if !mask.iter().any(|&m| m) {
        return Err(ApiError::bad_request("mask", "at least one point must be known"));
    }
    let mut opts = ExtrapolationOptions::default();
    if let Some(n) = req.starts {
        if n == 0 || n > MAX_STARTS {
            return Err(ApiError::bad_request("starts", format!("must be between 1 and {MAX_STARTS}, got {n}")));
        }
        opts.starts = n;
    }
    if let Some(seed) = req.seed {
        opts.seed = seed;
    }
    let partial = PartialSurface::new(g, mask, values).map_err(ApiError::from_core)?;
    let state = s.clone();
    let res = tokio::task::spawn_blocking(move || extrapolate(&state.model, &partial, &opts))
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            body: ErrorBody {
                error: format!("extrapolation task failed: {e}"),
                field: None,
            },
        })?
        .map_err(ApiError::from_core)?;
    let doc = SurfaceDoc::from(&res.surface);
    Ok(Json(ExtrapolateResponse {
        z_hat: res.z_hat,
        grid: doc.grid,
        vols: doc.vols,
        objective: res.objective,
        mae_known: res.mae_known,
        iterations: res.iterations,
        converged: res.converged,
        best_start: res.best_start,
    }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/model/meta", get(meta))
        .route("/thresholds", get(thresholds))
        .route("/diagnostics", get(diagnostics))
        .route("/decode", post(decode))
        .route("/encode", post(encode))
        .route("/extrapolate", post(extrapolate_handler))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Serves until the future is dropped or the process receives ctrl-c.
pub async fn serve(listener: TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    let addr: Option<SocketAddr> = listener.local_addr().ok();
    if let Some(a) = addr {
        log::info!("serving on http://{a}");
    }
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
