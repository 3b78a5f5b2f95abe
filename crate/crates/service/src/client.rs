//! Blocking HTTP client implementing [`Oracle`].

use std::time::Duration;

use extraction_lab::oracle::BudgetStatus;
use extraction_lab::{LabelMode, Oracle, OracleError, OracleResponse};
use reqwest::blocking::{Client, Response};
use reqwest::StatusCode;
use serde::de::DeserializeOwned;

use crate::wire::{ErrorBody, Meta, PredictRequest, PredictResponse};

/// An oracle reached over HTTP. Network failures are [`OracleError::Transport`];
/// unexpected bodies are [`OracleError::ProtocolViolation`].
#[derive(Debug, Clone)]
pub struct RemoteOracle {
    base: String,
    client: Client,
    meta: Meta,
}

fn transport(e: reqwest::Error) -> OracleError {
    OracleError::Transport(e.to_string())
}

fn decode<T: DeserializeOwned>(resp: Response) -> Result<T, OracleError> {
    let bytes = resp.bytes().map_err(transport)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| OracleError::ProtocolViolation(format!("{e}: {}", String::from_utf8_lossy(&bytes))))
}

impl RemoteOracle {
    /// Connects to `base_url` (e.g. `http://127.0.0.1:8080`) and reads its metadata.
    pub fn connect(base_url: &str) -> Result<Self, OracleError> {
        let client = Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(transport)?;
        let base = base_url.trim_end_matches('/').to_owned();
        let resp = client.get(format!("{base}/v1/meta")).send().map_err(transport)?;
        if resp.status() != StatusCode::OK {
            return Err(OracleError::ProtocolViolation(format!("meta returned {}", resp.status())));
        }
        let meta: Meta = decode(resp)?;
        Ok(Self { base, client, meta })
    }

    pub fn meta(&self) -> &Meta {
        &self.meta
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn validate(&self, response: PredictResponse) -> Result<OracleResponse, OracleError> {
        let c = self.meta.num_classes;
        match (&response, self.meta.label_mode) {
            (PredictResponse::Soft { probs }, LabelMode::Soft) if probs.len() == c && probs.iter().all(|p| p.is_finite()) => {}
            (PredictResponse::Hard { label }, LabelMode::Hard) if *label < c => {}
            _ => {
                return Err(OracleError::ProtocolViolation(format!(
                    "response {response:?} does not fit {} mode with {c} classes",
                    self.meta.label_mode
                )))
            }
        }
        Ok(response.into())
    }
}

impl Oracle for RemoteOracle {
    fn query(&self, sample: &[f64]) -> Result<OracleResponse, OracleError> {
        let body = serde_json::to_vec(&PredictRequest {
            features: sample.to_vec(),
        })
        .map_err(|e| OracleError::ProtocolViolation(e.to_string()))?;
        let resp = self
            .client
            .post(format!("{}/v1/predict", self.base))
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body)
            .send()
            .map_err(transport)?;
        match resp.status() {
            StatusCode::OK => self.validate(decode(resp)?),
            StatusCode::TOO_MANY_REQUESTS => {
                let err: ErrorBody = decode(resp)?;
                match (err.error.as_str(), err.used, err.limit) {
                    ("budget_exhausted", Some(used), Some(limit)) => Err(OracleError::BudgetExhausted { used, limit }),
                    _ => Err(OracleError::ProtocolViolation(format!("unexpected 429 body {err:?}"))),
                }
            }
            StatusCode::BAD_REQUEST => {
                let err: ErrorBody = decode(resp)?;
                match err.error.as_str() {
                    "dimension_mismatch" => Err(OracleError::DimensionMismatch {
                        expected: err.expected.unwrap_or(self.meta.input_dim),
                        got: err.got.unwrap_or(sample.len()),
                    }),
                    _ => Err(OracleError::ProtocolViolation(format!("request rejected: {}", err.error))),
                }
            }
            other => Err(OracleError::ProtocolViolation(format!("unexpected status {other}"))),
        }
    }

    fn budget_status(&self) -> Result<BudgetStatus, OracleError> {
        let resp = self
            .client
            .get(format!("{}/v1/budget", self.base))
            .send()
            .map_err(transport)?;
        if resp.status() != StatusCode::OK {
            return Err(OracleError::ProtocolViolation(format!("budget returned {}", resp.status())));
        }
        decode(resp)
    }

    fn label_mode(&self) -> LabelMode {
        self.meta.label_mode
    }

    fn num_classes(&self) -> usize {
        self.meta.num_classes
    }

    fn input_dim(&self) -> usize {
        self.meta.input_dim
    }
}
