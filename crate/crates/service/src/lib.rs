//! HTTP front end for a model bundle.
//!
//! * `POST /re-tagger`: multipart form with one file field named `image`;
//!   answers with the six class scores as a JSON object in canonical label
//!   order.
//! * `GET /healthz`: `200 {"status":"ok","bundle_version":...}` once the
//!   bundle is loaded, `503` before.
//!
//! The bundle is loaded once after the socket is bound and shared read-only
//! by all handlers. Inference runs on the blocking pool, at most
//! `workers` images at a time.

use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use axum::extract::multipart::MultipartRejection;
use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use re_tagger_core::{load_bundle, ModelBundle};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::Semaphore;
use tower_http::cors::{AllowOrigin, CorsLayer};
use tower_http::timeout::TimeoutLayer;
use tower_http::trace::TraceLayer;

pub const PREDICT_PATH: &str = "/re-tagger";
pub const HEALTH_PATH: &str = "/healthz";
/// Multipart field carrying the uploaded image.
pub const IMAGE_FIELD: &str = "image";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    pub bundle: PathBuf,
    pub max_upload_bytes: usize,
    pub request_timeout_secs: u64,
    /// Images classified concurrently.
    pub workers: usize,
    /// Allowed CORS origins; empty allows any origin.
    pub cors_origins: Vec<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            host: "127.0.0.1".into(),
            port: 5000,
            bundle: PathBuf::from("bundle"),
            max_upload_bytes: 10 * 1024 * 1024,
            request_timeout_secs: 30,
            workers: 2,
            cors_origins: Vec::new(),
        }
    }
}

impl ServiceConfig {
    pub fn address(&self) -> String {
        format!("{}:{}", self.host, self.port)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("cannot listen on {address}: {source}")]
    Bind { address: String, source: std::io::Error },
    #[error("failed to load bundle {path}: {source}")]
    Bundle {
        path: PathBuf,
        source: re_tagger_core::Error,
    },
    #[error("invalid service configuration: {0}")]
    Config(String),
    #[error("server error: {0}")]
    Io(#[from] std::io::Error),
}

/// Shared handler state. The bundle slot is empty until loading finishes.
#[derive(Debug)]
pub struct AppState {
    bundle: OnceLock<Arc<ModelBundle>>,
    permits: Semaphore,
}

impl AppState {
    pub fn new(workers: usize) -> Self {
        AppState {
            bundle: OnceLock::new(),
            permits: Semaphore::new(workers.max(1)),
        }
    }

    pub fn with_bundle(bundle: ModelBundle, workers: usize) -> Self {
        let state = Self::new(workers);
        state.set_bundle(bundle);
        state
    }

    /// Installs the bundle; later calls are ignored.
    pub fn set_bundle(&self, bundle: ModelBundle) {
        let _ = self.bundle.set(Arc::new(bundle));
    }

    pub fn bundle(&self) -> Option<&Arc<ModelBundle>> {
        self.bundle.get()
    }
}

/// Error body: `{"error": message}`, plus an `id` for internal failures so
/// the log line can be found without exposing details.
struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn internal(err: impl std::fmt::Display) -> Self {
        let id = uuid::Uuid::new_v4();
        tracing::error!(error_id = %id, "inference failed: {err}");
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, id.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = if self.status == StatusCode::INTERNAL_SERVER_ERROR {
            json!({"error": "internal error", "id": self.message})
        } else {
            json!({"error": self.message})
        };
        (self.status, Json(body)).into_response()
    }
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    match state.bundle() {
        Some(b) => Json(json!({"status": "ok", "bundle_version": b.version()})).into_response(),
        None => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({"status": "loading"}))).into_response(),
    }
}

async fn predict(
    State(state): State<Arc<AppState>>,
    multipart: Result<Multipart, MultipartRejection>,
) -> Result<Response, ApiError> {
    let bundle = state
        .bundle()
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model is still loading"))?;
    let mut multipart = multipart.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))?;

    let mut image = None;
    loop {
        let field = multipart
            .next_field()
            .await
            .map_err(|e| ApiError::new(e.status(), e.body_text()))?;
        let Some(field) = field else { break };
        if field.name() == Some(IMAGE_FIELD) {
            let bytes = field.bytes().await.map_err(|e| ApiError::new(e.status(), e.body_text()))?;
            image = Some(bytes);
            break;
        }
    }
    let image = image.ok_or_else(|| {
        ApiError::new(StatusCode::BAD_REQUEST, format!("multipart field `{IMAGE_FIELD}` is required"))
    })?;

    let _permit = state.permits.acquire().await.map_err(ApiError::internal)?;
    let result = tokio::task::spawn_blocking(move || bundle.predict(&image))
        .await
        .map_err(ApiError::internal)?;
    match result {
        Ok(scores) => Ok((
            [(header::CONTENT_TYPE, HeaderValue::from_static("application/json"))],
            scores.to_json(),
        )
            .into_response()),
        Err(re_tagger_core::Error::Decode(msg)) => Err(ApiError::new(
            StatusCode::UNSUPPORTED_MEDIA_TYPE,
            format!("not a decodable image: {msg}"),
        )),
        Err(e) => Err(ApiError::internal(e)),
    }
}

fn cors(origins: &[String]) -> Result<CorsLayer, ServiceError> {
    let allow = if origins.is_empty() {
        AllowOrigin::any()
    } else {
        let parsed = origins
            .iter()
            .map(|o| HeaderValue::from_str(o).map_err(|_| ServiceError::Config(format!("bad CORS origin `{o}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        AllowOrigin::list(parsed)
    };
    Ok(CorsLayer::new()
        .allow_origin(allow)
        .allow_methods([axum::http::Method::GET, axum::http::Method::POST]))
}

/// The service's routes and middleware.
pub fn router(state: Arc<AppState>, config: &ServiceConfig) -> Result<Router, ServiceError> {
    Ok(Router::new()
        .route(PREDICT_PATH, post(predict))
        .route(HEALTH_PATH, get(health))
        .layer(DefaultBodyLimit::max(config.max_upload_bytes))
        .layer(TimeoutLayer::with_status_code(
            StatusCode::REQUEST_TIMEOUT,
            Duration::from_secs(config.request_timeout_secs.max(1)),
        ))
        .layer(cors(&config.cors_origins)?)
        .layer(TraceLayer::new_for_http())
        .with_state(state))
}

/// Binds the configured address. Fails fast when the port is taken.
pub async fn bind(config: &ServiceConfig) -> Result<TcpListener, ServiceError> {
    let address = config.address();
    TcpListener::bind(&address)
        .await
        .map_err(|source| ServiceError::Bind { address, source })
}

/// Serves on an already bound listener until `shutdown` resolves. The bundle
/// is loaded in the background; health reports 503 until it is ready. A
/// bundle that fails to load stops the server with an error.
pub async fn serve(
    listener: TcpListener,
    config: ServiceConfig,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    let state = Arc::new(AppState::new(config.workers));
    let app = router(state.clone(), &config)?;
    let local: SocketAddr = listener.local_addr()?;
    tracing::info!("listening on http://{local}{PREDICT_PATH}");

    let path = config.bundle.clone();
    let (failed_tx, failed_rx) = tokio::sync::oneshot::channel();
    let loader = {
        let state = state.clone();
        tokio::task::spawn_blocking(move || match load_bundle(&path) {
            Ok(bundle) => {
                tracing::info!("loaded bundle {}", bundle.identifier());
                state.set_bundle(bundle);
                Ok(())
            }
            Err(source) => {
                let _ = failed_tx.send(());
                Err(ServiceError::Bundle { path, source })
            }
        })
    };

    let load_failed = Arc::new(AtomicBool::new(false));
    let stop = {
        let load_failed = load_failed.clone();
        async move {
            tokio::select! {
                _ = shutdown => {}
                Ok(()) = failed_rx => load_failed.store(true, Ordering::SeqCst),
            }
        }
    };
    axum::serve(listener, app).with_graceful_shutdown(stop).await?;
    if load_failed.load(Ordering::SeqCst) {
        if let Ok(Err(e)) = loader.await {
            return Err(e);
        }
    }
    Ok(())
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
    tracing::info!("shutting down");
}
