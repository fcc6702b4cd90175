//! Async client for the serve-mode JSON API.

use reqwest::{Response, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;

use volenc_core::wire::{
    DecodeRequest, Diagnostics, EncodeRequest, EncodeResponse, ErrorBody, ExtrapolateRequest, ExtrapolateResponse,
    Health, ModelMeta, SurfaceDoc, Thresholds,
};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(#[from] reqwest::Error),
    /// The server answered with a non-success status.
    #[error("{status}: {}{}", body.error, body.field.as_ref().map(|f| format!(" (field `{f}`)")).unwrap_or_default())]
    Api { status: StatusCode, body: ErrorBody },
}

impl ClientError {
    pub fn status(&self) -> Option<StatusCode> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            ClientError::Transport(e) => e.status(),
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the server root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Self::with_http(base, reqwest::Client::new())
    }

    pub fn with_http(base: impl Into<String>, http: reqwest::Client) -> Self {
        let base = base.into().trim_end_matches('/').to_string();
        Self { base, http }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    async fn finish<T: DeserializeOwned>(resp: Response) -> Result<T> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let text = resp.text().await?;
        let body = serde_json::from_str(&text).unwrap_or(ErrorBody {
            error: text,
            field: None,
        });
        Err(ClientError::Api { status, body })
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        Self::finish(self.http.get(format!("{}{path}", self.base)).send().await?).await
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        Self::finish(self.http.post(format!("{}{path}", self.base)).json(body).send().await?).await
    }

    pub async fn health(&self) -> Result<Health> {
        self.get("/health").await
    }

    pub async fn meta(&self) -> Result<ModelMeta> {
        self.get("/model/meta").await
    }

    pub async fn thresholds(&self) -> Result<Thresholds> {
        self.get("/thresholds").await
    }

    pub async fn diagnostics(&self) -> Result<Diagnostics> {
        self.get("/diagnostics").await
    }

    pub async fn decode(&self, z: &[f64]) -> Result<SurfaceDoc> {
        self.post("/decode", &DecodeRequest { z: z.to_vec() }).await
    }

    pub async fn encode(&self, vols: Vec<Vec<f64>>) -> Result<EncodeResponse> {
        self.post("/encode", &EncodeRequest { vols }).await
    }

    pub async fn extrapolate(&self, req: &ExtrapolateRequest) -> Result<ExtrapolateResponse> {
        self.post("/extrapolate", req).await
    }
}
