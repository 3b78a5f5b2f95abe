//! HTTP face of a budgeted teacher, and the client that attacks it.
//!
//! Routes:
//!
//! - `GET /v1/meta` returns `{"label_mode","num_classes","input_dim"}`
//! - `GET /v1/budget` returns `{"used","limit"}`
//! - `POST /v1/predict` takes `{"features":[...]}` and returns
//!   `{"kind":"soft","probs":[...]}` or `{"kind":"hard","label":c}`
//!
//! Errors are `{"error":code}` with status 400 (`dimension_mismatch`,
//! `malformed_request`) or 429 (`budget_exhausted`, plus `used`/`limit`).
//! One sample per request keeps the accounting one-to-one with the
//! in-process [`LocalOracle`].

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use extraction_lab::oracle::BudgetStatus;
use extraction_lab::{LabelMode, LocalOracle, Network, Oracle, OracleError};
use thiserror::Error;
use tokio::sync::oneshot;

mod client;
pub mod wire;

pub use client::RemoteOracle;
use wire::{ErrorBody, Meta, PredictRequest, PredictResponse};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("invalid service config: {0}")]
    InvalidConfig(String),
    #[error("cannot load checkpoint {path}: {source}")]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: extraction_lab::nn::NnError,
    },
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("service runtime failed: {0}")]
    Runtime(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub checkpoint: PathBuf,
    pub label_mode: LabelMode,
    pub budget_limit: usize,
}

/// A service running on a background thread. Dropping the handle stops it.
#[derive(Debug)]
pub struct ServiceHandle {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Stops accepting requests and waits for the server thread to exit.
    pub fn shutdown(mut self) -> Result<(), ServiceError> {
        self.stop_and_join()
    }

    /// Blocks until the server exits on its own (it normally never does).
    pub fn wait(mut self) -> Result<(), ServiceError> {
        match self.thread.take() {
            Some(t) => t.join().expect("service thread panicked").map_err(ServiceError::Runtime),
            None => Ok(()),
        }
    }

    fn stop_and_join(&mut self) -> Result<(), ServiceError> {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().expect("service thread panicked").map_err(ServiceError::Runtime),
            None => Ok(()),
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        if let Err(e) = self.stop_and_join() {
            log::warn!("service shutdown: {e}");
        }
    }
}

/// Loads the checkpoint and starts serving it.
pub fn serve(cfg: &ServiceConfig) -> Result<ServiceHandle, ServiceError> {
    if cfg.budget_limit == 0 {
        return Err(ServiceError::InvalidConfig("budget_limit must be >= 1".into()));
    }
    let teacher = Network::load_checkpoint(&cfg.checkpoint).map_err(|source| ServiceError::Checkpoint {
        path: cfg.checkpoint.clone(),
        source,
    })?;
    serve_oracle(LocalOracle::new(teacher, cfg.label_mode, cfg.budget_limit), cfg.bind)
}

/// Serves an in-process oracle. Binding happens before this returns, so a
/// taken port is reported here. Use port 0 for an ephemeral port.
pub fn serve_oracle(oracle: LocalOracle, bind: SocketAddr) -> Result<ServiceHandle, ServiceError> {
    let listener = std::net::TcpListener::bind(bind).map_err(|source| ServiceError::Bind { addr: bind, source })?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = router(Arc::new(oracle));
    let thread = std::thread::Builder::new()
        .name(format!("oracle-service-{}", addr.port()))
        .spawn(move || {
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener)?;
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
            })
        })?;
    log::info!("oracle service listening on {addr}");
    Ok(ServiceHandle {
        addr,
        stop: Some(tx),
        thread: Some(thread),
    })
}

pub fn router(oracle: Arc<LocalOracle>) -> Router {
    Router::new()
        .route("/v1/meta", get(meta))
        .route("/v1/budget", get(budget))
        .route("/v1/predict", post(predict))
        .with_state(oracle)
}

type Shared = State<Arc<LocalOracle>>;

async fn meta(State(oracle): Shared) -> Json<Meta> {
    Json(Meta {
        label_mode: oracle.label_mode(),
        num_classes: oracle.num_classes(),
        input_dim: oracle.input_dim(),
    })
}

async fn budget(State(oracle): Shared) -> Json<BudgetStatus> {
    Json(oracle.budget_status().expect("local budget status is infallible"))
}

fn error(status: StatusCode, body: ErrorBody) -> Response {
    (status, Json(body)).into_response()
}

async fn predict(State(oracle): Shared, body: Bytes) -> Response {
    let request: PredictRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => {
            log::debug!("malformed predict body: {e}");
            return error(StatusCode::BAD_REQUEST, ErrorBody::code("malformed_request"));
        }
    };
    match oracle.query(&request.features) {
        Ok(response) => Json(PredictResponse::from(response)).into_response(),
        Err(OracleError::DimensionMismatch { expected, got }) => error(
            StatusCode::BAD_REQUEST,
            ErrorBody {
                expected: Some(expected),
                got: Some(got),
                ..ErrorBody::code("dimension_mismatch")
            },
        ),
        Err(OracleError::BudgetExhausted { used, limit }) => error(
            StatusCode::TOO_MANY_REQUESTS,
            ErrorBody {
                used: Some(used),
                limit: Some(limit),
                ..ErrorBody::code("budget_exhausted")
            },
        ),
        Err(e) => {
            log::error!("unexpected oracle failure: {e}");
            error(StatusCode::INTERNAL_SERVER_ERROR, ErrorBody::code("internal"))
        }
    }
}
