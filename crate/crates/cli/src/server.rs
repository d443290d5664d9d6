//! HTTP routes over [`ServiceState`].
//!
//! | route               | body                  |
//! |---------------------|-----------------------|
//! | `GET /health`       |                       |
//! | `GET /shapes`       |                       |
//! | `POST /encode_shape`| `{shape_id}`          |
//! | `POST /generate`    | a generate request    |
//! | `POST /sweep`       | a sweep request       |
//! | `GET /runs/{id}`    |                       |
//!
//! Generation runs on a fixed number of blocking workers. Requests beyond
//! `workers + queue` in flight are turned away with 429.

use std::sync::{Arc, Mutex, OnceLock};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;
use shapewords::service::{EncodeShapeRequest, FieldError, GenerateRequest, ServiceError, ServiceState, SweepRequest};
use tokio::sync::Semaphore;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolConfig {
    pub workers: usize,
    pub queue: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self { workers: 2, queue: 8 }
    }
}

impl PoolConfig {
    pub fn validate(&self) -> shapewords::Result<()> {
        if self.workers == 0 {
            return Err(shapewords::Error::invalid("workers", "must be positive"));
        }
        Ok(())
    }
}

struct Shared {
    service: OnceLock<Arc<ServiceState>>,
    load_error: Mutex<Option<String>>,
    admitted: Arc<Semaphore>,
    workers: Arc<Semaphore>,
}

/// Router state; starts out loading until a [`ServiceState`] is installed.
#[derive(Clone)]
pub struct AppState {
    shared: Arc<Shared>,
}

impl AppState {
    pub fn loading(pool: PoolConfig) -> Self {
        Self {
            shared: Arc::new(Shared {
                service: OnceLock::new(),
                load_error: Mutex::new(None),
                admitted: Arc::new(Semaphore::new(pool.workers + pool.queue)),
                workers: Arc::new(Semaphore::new(pool.workers)),
            }),
        }
    }

    pub fn ready(service: ServiceState, pool: PoolConfig) -> Self {
        let state = Self::loading(pool);
        state.install(service);
        state
    }

    pub fn install(&self, service: ServiceState) {
        let _ = self.shared.service.set(Arc::new(service));
    }

    pub fn fail(&self, message: String) {
        *self.shared.load_error.lock().unwrap_or_else(|p| p.into_inner()) = Some(message);
    }

    fn service(&self) -> Result<Arc<ServiceState>, ApiError> {
        self.shared.service.get().cloned().ok_or_else(|| {
            let failed = self.shared.load_error.lock().unwrap_or_else(|p| p.into_inner()).clone();
            ApiError::Service(ServiceError::Unavailable(
                failed.map_or_else(|| "backends are loading".into(), |e| format!("backend load failed: {e}")),
            ))
        })
    }

    /// Runs `job` on a worker once one is free; rejects when the queue is full.
    async fn submit<T, F>(&self, job: F) -> Result<T, ApiError>
    where
        T: Send + 'static,
        F: FnOnce() -> Result<T, ServiceError> + Send + 'static,
    {
        let _admitted = self.shared.admitted.clone().try_acquire_owned().map_err(|_| ApiError::Busy)?;
        let _worker = self
            .shared
            .workers
            .clone()
            .acquire_owned()
            .await
            .map_err(|_| ApiError::Busy)?;
        tokio::task::spawn_blocking(job)
            .await
            .map_err(|e| ApiError::Service(ServiceError::Unavailable(format!("worker crashed: {e}"))))?
            .map_err(ApiError::Service)
    }
}

#[derive(Debug)]
pub enum ApiError {
    Service(ServiceError),
    Busy,
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError::Service(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::Busy => (
                StatusCode::TOO_MANY_REQUESTS,
                json!({ "error": "busy", "message": "generation queue is full" }),
            ),
            ApiError::Service(e) => {
                let message = e.to_string();
                match e {
                    ServiceError::Validation(fields) => (
                        StatusCode::BAD_REQUEST,
                        json!({ "error": "validation", "message": message, "fields": fields }),
                    ),
                    ServiceError::NotFound(_) => (StatusCode::NOT_FOUND, json!({ "error": "not_found", "message": message })),
                    ServiceError::Unavailable(_) => (
                        StatusCode::SERVICE_UNAVAILABLE,
                        json!({ "error": "unavailable", "message": message }),
                    ),
                    ServiceError::Internal(_) => (
                        StatusCode::INTERNAL_SERVER_ERROR,
                        json!({ "error": "internal", "message": message }),
                    ),
                }
            }
        };
        (status, Json(body)).into_response()
    }
}

/// Deserializes a JSON body, naming the offending field on failure.
fn parse_body<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let message = inner.to_string();
        let field = if path != "." {
            path
        } else {
            message
                .strip_prefix("missing field `")
                .and_then(|rest| rest.split('`').next())
                .unwrap_or("body")
                .to_string()
        };
        ApiError::Service(ServiceError::Validation(vec![FieldError { field, message }]))
    })
}

fn ok<T: Serialize>(value: T) -> Response {
    (StatusCode::OK, Json(value)).into_response()
}

async fn health(State(state): State<AppState>) -> Response {
    match state.service() {
        Ok(service) => ok(service.health()),
        Err(_) => {
            let failed = state.shared.load_error.lock().unwrap_or_else(|p| p.into_inner()).clone();
            let body = match failed {
                Some(message) => json!({ "status": "error", "message": message }),
                None => json!({ "status": "loading" }),
            };
            (StatusCode::SERVICE_UNAVAILABLE, Json(body)).into_response()
        }
    }
}

async fn shapes(State(state): State<AppState>) -> Result<Response, ApiError> {
    let service = state.service()?;
    Ok(ok(json!({ "shapes": service.registry.list() })))
}

async fn encode_shape(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: EncodeShapeRequest = parse_body(&body)?;
    let service = state.service()?;
    let resp = state.submit(move || service.encode_shape(&req)).await?;
    Ok(ok(resp))
}

async fn generate(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: GenerateRequest = parse_body(&body)?;
    let service = state.service()?;
    service.validate_generate(&req)?;
    let resp = state.submit(move || service.generate(&req)).await?;
    Ok(ok(resp))
}

async fn sweep(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: SweepRequest = parse_body(&body)?;
    let service = state.service()?;
    service.validate_sweep(&req)?;
    let resp = state.submit(move || service.sweep(&req)).await?;
    Ok(ok(resp))
}

async fn run(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let service = state.service()?;
    let stored = tokio::task::spawn_blocking(move || service.fetch_run(&id))
        .await
        .map_err(|e| ApiError::Service(ServiceError::Unavailable(e.to_string())))??;
    Ok(ok(stored))
}

async fn fallback() -> Response {
    (
        StatusCode::NOT_FOUND,
        Json(json!({ "error": "not_found", "message": "no such route" })),
    )
        .into_response()
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/shapes", get(shapes))
        .route("/encode_shape", post(encode_shape))
        .route("/generate", post(generate))
        .route("/sweep", post(sweep))
        .route("/runs/{id}", get(run))
        .fallback(fallback)
        .with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
