//! The black-box teacher boundary.
//!
//! An [`Oracle`] answers one sample per call with either the teacher's full
//! class distribution or only its argmax, and refuses to answer once its
//! budget is spent. The attack only ever sees `&dyn Oracle`; unbudgeted
//! access to an in-process teacher lives on [`LocalOracle`] itself and is
//! meant for evaluation and diagnostics.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{argmax, one_hot};
use crate::nn::{softmax, Network};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OracleError {
    #[error("budget exhausted ({used}/{limit} calls used)")]
    BudgetExhausted { used: usize, limit: usize },
    #[error("dimension mismatch: expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("unbudgeted reference labels are unavailable for this oracle")]
    Unavailable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    Soft,
    Hard,
}

impl LabelMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Soft => "soft",
            Self::Hard => "hard",
        }
    }
}

impl std::fmt::Display for LabelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.as_str())
    }
}

impl std::str::FromStr for LabelMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "soft" => Ok(Self::Soft),
            "hard" => Ok(Self::Hard),
            other => Err(format!("unknown label mode {other:?} (expected soft|hard)")),
        }
    }
}

/// Hard cap on oracle calls and the number already spent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub limit: usize,
    pub used: usize,
}

impl Budget {
    pub fn new(limit: usize) -> Self {
        Self { limit, used: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.limit - self.used
    }

    /// Spends one call, or fails without changing the counter.
    pub fn try_consume(&mut self) -> Result<(), OracleError> {
        if self.used >= self.limit {
            return Err(OracleError::BudgetExhausted {
                used: self.used,
                limit: self.limit,
            });
        }
        self.used += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OracleResponse {
    Soft(Vec<f64>),
    Hard(usize),
}

impl OracleResponse {
    /// Class with the highest response.
    pub fn class(&self) -> usize {
        match self {
            Self::Soft(p) => argmax(p),
            Self::Hard(c) => *c,
        }
    }

    /// The response as a training target: the distribution itself, or one-hot.
    pub fn to_distribution(&self, num_classes: usize) -> Vec<f64> {
        match self {
            Self::Soft(p) => p.clone(),
            Self::Hard(c) => one_hot(*c, num_classes),
        }
    }

    pub fn mode(&self) -> LabelMode {
        match self {
            Self::Soft(_) => LabelMode::Soft,
            Self::Hard(_) => LabelMode::Hard,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetStatus {
    pub used: usize,
    pub limit: usize,
}

/// A budgeted per-sample classifier.
pub trait Oracle: Send + Sync {
    /// Answers one query and spends one unit of budget. Failed calls are free.
    fn query(&self, sample: &[f64]) -> Result<OracleResponse, OracleError>;

    fn budget_status(&self) -> Result<BudgetStatus, OracleError>;

    fn label_mode(&self) -> LabelMode;

    fn num_classes(&self) -> usize;

    fn input_dim(&self) -> usize;
}

impl<O: Oracle + ?Sized> Oracle for Box<O> {
    fn query(&self, sample: &[f64]) -> Result<OracleResponse, OracleError> {
        (**self).query(sample)
    }
    fn budget_status(&self) -> Result<BudgetStatus, OracleError> {
        (**self).budget_status()
    }
    fn label_mode(&self) -> LabelMode {
        (**self).label_mode()
    }
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }
}

/// What a teacher answers for `sample` in the given mode, with no accounting.
pub fn teacher_response(teacher: &Network, mode: LabelMode, sample: &[f64]) -> Result<OracleResponse, OracleError> {
    let expected = teacher.spec().input_dim;
    if sample.len() != expected {
        return Err(OracleError::DimensionMismatch {
            expected,
            got: sample.len(),
        });
    }
    let logits = teacher
        .forward(sample)
        .expect("input dimension checked above")
        .logits;
    Ok(match mode {
        LabelMode::Soft => OracleResponse::Soft(softmax(&logits)),
        LabelMode::Hard => OracleResponse::Hard(argmax(&logits)),
    })
}

/// In-process teacher behind a budget.
#[derive(Debug)]
pub struct LocalOracle {
    teacher: Network,
    mode: LabelMode,
    budget: Mutex<Budget>,
}

impl LocalOracle {
    pub fn new(teacher: Network, mode: LabelMode, limit: usize) -> Self {
        Self {
            teacher,
            mode,
            budget: Mutex::new(Budget::new(limit)),
        }
    }

    /// Teacher labels for evaluation and pseudo-label diagnostics. Does not
    /// touch the budget.
    pub fn unbudgeted_reference_labels(&self, samples: &[Vec<f64>]) -> Result<Vec<OracleResponse>, OracleError> {
        samples
            .iter()
            .map(|x| teacher_response(&self.teacher, self.mode, x))
            .collect()
    }

    pub fn teacher(&self) -> &Network {
        &self.teacher
    }
}

impl Oracle for LocalOracle {
    fn query(&self, sample: &[f64]) -> Result<OracleResponse, OracleError> {
        if sample.len() != self.teacher.spec().input_dim {
            return Err(OracleError::DimensionMismatch {
                expected: self.teacher.spec().input_dim,
                got: sample.len(),
            });
        }
        self.budget.lock().expect("budget lock poisoned").try_consume()?;
        teacher_response(&self.teacher, self.mode, sample)
    }

    fn budget_status(&self) -> Result<BudgetStatus, OracleError> {
        let b = *self.budget.lock().expect("budget lock poisoned");
        Ok(BudgetStatus {
            used: b.used,
            limit: b.limit,
        })
    }

    fn label_mode(&self) -> LabelMode {
        self.mode
    }

    fn num_classes(&self) -> usize {
        self.teacher.spec().num_classes
    }

    fn input_dim(&self) -> usize {
        self.teacher.spec().input_dim
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CallCounts {
    pub successes: usize,
    pub failures: usize,
    /// Calls attempted after the first budget-exhausted failure.
    pub after_exhaustion: usize,
}

/// Wrapper that counts calls and can impose its own cap on top of the inner
/// oracle's (used to give each run of a sweep its own budget against a
/// shared remote service).
#[derive(Debug)]
pub struct CountingOracle<O> {
    inner: O,
    limit: Option<usize>,
    state: Mutex<(CallCounts, bool)>,
}

impl<O: Oracle> CountingOracle<O> {
    pub fn new(inner: O) -> Self {
        Self {
            inner,
            limit: None,
            state: Mutex::new((CallCounts::default(), false)),
        }
    }

    pub fn with_limit(inner: O, limit: usize) -> Self {
        Self {
            limit: Some(limit),
            ..Self::new(inner)
        }
    }

    pub fn counts(&self) -> CallCounts {
        self.state.lock().expect("counter lock poisoned").0
    }

    pub fn inner(&self) -> &O {
        &self.inner
    }
}

impl<O: Oracle> Oracle for CountingOracle<O> {
    fn query(&self, sample: &[f64]) -> Result<OracleResponse, OracleError> {
        let mut state = self.state.lock().expect("counter lock poisoned");
        if state.1 {
            state.0.after_exhaustion += 1;
        }
        if let Some(limit) = self.limit {
            if state.0.successes >= limit {
                state.0.failures += 1;
                state.1 = true;
                return Err(OracleError::BudgetExhausted {
                    used: state.0.successes,
                    limit,
                });
            }
        }
        let result = self.inner.query(sample);
        match &result {
            Ok(_) => state.0.successes += 1,
            Err(e) => {
                state.0.failures += 1;
                if matches!(e, OracleError::BudgetExhausted { .. }) {
                    state.1 = true;
                }
            }
        }
        result
    }

    fn budget_status(&self) -> Result<BudgetStatus, OracleError> {
        match self.limit {
            Some(limit) => Ok(BudgetStatus {
                used: self.counts().successes,
                limit,
            }),
            None => self.inner.budget_status(),
        }
    }

    fn label_mode(&self) -> LabelMode {
        self.inner.label_mode()
    }

    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }
}
