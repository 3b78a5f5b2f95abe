//! JSON bodies exchanged by the service and [`crate::RemoteOracle`].

use extraction_lab::{LabelMode, OracleResponse};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub label_mode: LabelMode,
    pub num_classes: usize,
    pub input_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictRequest {
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PredictResponse {
    Soft { probs: Vec<f64> },
    Hard { label: usize },
}

impl From<OracleResponse> for PredictResponse {
    fn from(r: OracleResponse) -> Self {
        match r {
            OracleResponse::Soft(probs) => Self::Soft { probs },
            OracleResponse::Hard(label) => Self::Hard { label },
        }
    }
}

impl From<PredictResponse> for OracleResponse {
    fn from(r: PredictResponse) -> Self {
        match r {
            PredictResponse::Soft { probs } => Self::Soft(probs),
            PredictResponse::Hard { label } => Self::Hard(label),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub used: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub got: Option<usize>,
}

impl ErrorBody {
    pub fn code(code: &str) -> Self {
        Self {
            error: code.to_owned(),
            used: None,
            limit: None,
            expected: None,
            got: None,
        }
    }
}
