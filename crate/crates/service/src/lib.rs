//! JSON-over-HTTP facade for the compression pipeline.
//!
//! Routes: `POST /compress`, `POST /abbreviate`, `POST /expand`,
//! `POST /quantize`, `GET /health`. Static UI assets are served from
//! [`ServiceOptions::static_dir`] when set.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use promptpack::abbreviation::{abbreviate_document, expand_text, source_hash, AbbrevDictionary, NGramConfig};
use promptpack::pipeline::{
    Attachment, Bundle, CompressionReport, FailureKind, Pipeline, PipelineConfig, PipelineError, PipelineInput,
    ProvidersConfig, TokenDetail,
};
use promptpack::table::{quantize_table, QuantConfig, Table, TableSidecar};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::{Any, CorsLayer};
use tower_http::services::ServeDir;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

const MAX_SESSIONS: usize = 1024;

#[derive(Debug, Clone, Default)]
pub struct ServiceOptions {
    pub providers: ProvidersConfig,
    /// Allowed CORS origin; any origin when unset.
    pub cors_origin: Option<String>,
    pub static_dir: Option<PathBuf>,
}

impl ServiceOptions {
    /// `SCORER_ENDPOINT`, `SCORER_TOKEN`, `EMBEDDER_ENDPOINT`, `CORPUS_PATH`,
    /// `CORS_ORIGIN` and `WEBUI_DIR`.
    pub fn from_env() -> Self {
        let mut providers = ProvidersConfig::default();
        providers.apply_env();
        if let Ok(p) = std::env::var("CORPUS_PATH") {
            providers.corpus_path = Some(p.into());
        }
        Self {
            providers,
            cors_origin: std::env::var("CORS_ORIGIN").ok().filter(|s| !s.is_empty()),
            static_dir: std::env::var("WEBUI_DIR").ok().filter(|s| !s.is_empty()).map(PathBuf::from),
        }
    }
}

/// What the service remembers about a session: the content hash of the last
/// submitted input and the config it was run with.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct SessionState {
    pub session_id: String,
    pub content_hash: String,
    pub config: PipelineConfig,
}

#[derive(Clone)]
pub struct AppState {
    base: Arc<Pipeline>,
    sessions: Arc<RwLock<HashMap<String, SessionState>>>,
    next_session: Arc<AtomicU64>,
}

impl AppState {
    /// Loads the corpus and providers once; every request reuses them.
    pub fn new(providers: ProvidersConfig) -> Result<Self, PipelineError> {
        let config = PipelineConfig {
            providers,
            ..PipelineConfig::default()
        };
        Ok(Self {
            base: Arc::new(Pipeline::new(config)?),
            sessions: Arc::new(RwLock::new(HashMap::new())),
            next_session: Arc::new(AtomicU64::new(1)),
        })
    }

    pub fn session(&self, id: &str) -> Option<SessionState> {
        self.sessions.read().expect("session lock").get(id).cloned()
    }

    fn remember(&self, session_id: Option<String>, content_hash: String, config: PipelineConfig) -> String {
        let id = session_id.unwrap_or_else(|| format!("s{}", self.next_session.fetch_add(1, Ordering::Relaxed)));
        let mut sessions = self.sessions.write().expect("session lock");
        if sessions.len() >= MAX_SESSIONS && !sessions.contains_key(&id) {
            sessions.clear();
        }
        sessions.insert(
            id.clone(),
            SessionState {
                session_id: id.clone(),
                content_hash,
                config,
            },
        );
        id
    }
}

pub fn router(state: AppState, options: &ServiceOptions) -> Router {
    let cors = match options.cors_origin.as_deref().and_then(|o| o.parse::<HeaderValue>().ok()) {
        Some(origin) => CorsLayer::new().allow_origin(origin),
        None => CorsLayer::new().allow_origin(Any),
    }
    .allow_methods(Any)
    .allow_headers(Any);

    let api = Router::new()
        .route("/compress", post(compress))
        .route("/abbreviate", post(abbreviate))
        .route("/expand", post(expand))
        .route("/quantize", post(quantize))
        .route("/health", get(health))
        .with_state(state);
    let app = match &options.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir).fallback(get(not_found))),
        None => api.fallback(not_found),
    };
    app.layer(cors)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn malformed(message: impl ToString) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            kind: "malformed",
            message: message.to_string(),
        }
    }

    fn invalid(message: impl ToString) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            kind: "invalid",
            message: message.to_string(),
        }
    }

    fn internal(message: impl ToString) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            kind: "internal",
            message: message.to_string(),
        }
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let (status, kind) = match e.kind {
            FailureKind::Config => (StatusCode::UNPROCESSABLE_ENTITY, "invalid"),
            FailureKind::Data => (StatusCode::UNPROCESSABLE_ENTITY, "data"),
            FailureKind::Provider => (StatusCode::BAD_GATEWAY, "provider"),
        };
        Self {
            status,
            kind,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"kind": self.kind, "message": self.message}});
        (self.status, Json(body)).into_response()
    }
}

async fn not_found() -> ApiError {
    ApiError {
        status: StatusCode::NOT_FOUND,
        kind: "notFound",
        message: "no such route".into(),
    }
}

/// Parses the body as a JSON object; syntax errors are 400s.
fn parse_object(body: &Bytes) -> Result<serde_json::Map<String, Value>, ApiError> {
    match serde_json::from_slice::<Value>(body).map_err(ApiError::malformed)? {
        Value::Object(map) => Ok(map),
        _ => Err(ApiError::malformed("request body must be a JSON object")),
    }
}

/// Removes `key` and deserializes it; shape errors are 422s since the field
/// holds settings rather than request structure.
fn take_settings<T: DeserializeOwned + Default>(
    map: &mut serde_json::Map<String, Value>,
    key: &str,
) -> Result<T, ApiError> {
    match map.remove(key) {
        None | Some(Value::Null) => Ok(T::default()),
        Some(v) => serde_json::from_value(v).map_err(|e| ApiError::invalid(format!("{key}: {e}"))),
    }
}

fn rest<T: DeserializeOwned>(map: serde_json::Map<String, Value>) -> Result<T, ApiError> {
    serde_json::from_value(Value::Object(map)).map_err(ApiError::malformed)
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct CompressRequest {
    prompt: String,
    #[serde(default)]
    attachments: Vec<Attachment>,
    #[serde(default)]
    exemplar_pool: Vec<String>,
    #[serde(default)]
    session_id: Option<String>,
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct CompressResponse {
    session_id: String,
    bundle: Bundle,
    report: CompressionReport,
    token_detail: Vec<TokenDetail>,
}

fn content_hash(input: &PipelineInput) -> String {
    source_hash(&serde_json::to_string(input).expect("input serializes"))
}

async fn compress(State(state): State<AppState>, body: Bytes) -> Result<Json<CompressResponse>, ApiError> {
    let mut map = parse_object(&body)?;
    let mut config: PipelineConfig = take_settings(&mut map, "config")?;
    let req: CompressRequest = rest(map)?;
    // Providers are fixed by the server; clients only tune compression settings.
    config.providers = state.base.config().providers.clone();
    config.validate()?;
    let input = PipelineInput {
        prompt: req.prompt,
        attachments: req.attachments,
        exemplar_pool: req.exemplar_pool,
    };
    let hash = content_hash(&input);
    let base = Arc::clone(&state.base);
    let run_config = config.clone();
    let out = blocking(move || Ok(base.with_config(run_config)?.run(&input)?)).await?;
    let session_id = state.remember(req.session_id, hash, config);
    Ok(Json(CompressResponse {
        session_id,
        report: out.bundle.report.clone(),
        bundle: out.bundle,
        token_detail: out.token_detail,
    }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AbbreviateRequest {
    text: String,
}

async fn abbreviate(body: Bytes) -> Result<Json<Value>, ApiError> {
    let mut map = parse_object(&body)?;
    let config: NGramConfig = take_settings(&mut map, "ngram")?;
    let req: AbbreviateRequest = rest(map)?;
    let abbr = blocking(move || abbreviate_document(&req.text, &config).map_err(ApiError::invalid)).await?;
    Ok(Json(json!({"text": abbr.text, "dictionary": abbr.dictionary})))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExpandRequest {
    text: String,
    dictionary: AbbrevDictionary,
}

async fn expand(body: Bytes) -> Result<Json<Value>, ApiError> {
    let req: ExpandRequest = rest(parse_object(&body)?)?;
    let text = blocking(move || expand_text(&req.text, &req.dictionary).map_err(ApiError::invalid)).await?;
    Ok(Json(json!({"text": text})))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuantizeRequest {
    csv: String,
}

#[derive(Debug, Serialize)]
struct QuantizeResponse {
    csv: String,
    sidecar: TableSidecar,
}

async fn quantize(body: Bytes) -> Result<Json<QuantizeResponse>, ApiError> {
    let mut map = parse_object(&body)?;
    let config: QuantConfig = take_settings(&mut map, "quant")?;
    let req: QuantizeRequest = rest(map)?;
    let out = blocking(move || {
        let table = Table::parse(&req.csv).map_err(ApiError::invalid)?;
        let q = quantize_table(&table, &config).map_err(ApiError::invalid)?;
        let csv = q.render(config.render).map_err(ApiError::invalid)?;
        Ok(QuantizeResponse { csv, sidecar: q.sidecar })
    })
    .await?;
    Ok(Json(out))
}

async fn health(State(state): State<AppState>) -> Result<Json<Value>, ApiError> {
    let base = Arc::clone(&state.base);
    let reachable = blocking(move || Ok(base.provider_health())).await?;
    Ok(Json(json!({
        "status": "ok",
        "version": VERSION,
        "providersReachable": reachable,
    })))
}
