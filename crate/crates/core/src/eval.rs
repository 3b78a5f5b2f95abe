//! Scoring helpers: teacher agreement, pseudo-label quality, summary stats.

use crate::aspkd::RoundObserver;
use crate::data::ProxyPool;
use crate::linalg::argmax;
use crate::nn::{Network, NnError};

/// Fraction of `features` on which the student's argmax matches `teacher_labels`.
pub fn agreement_accuracy(student: &Network, features: &[Vec<f64>], teacher_labels: &[usize]) -> Result<f64, NnError> {
    if features.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    if features.len() != teacher_labels.len() {
        return Err(NnError::DimensionMismatch {
            expected: features.len(),
            got: teacher_labels.len(),
        });
    }
    let mut hits = 0usize;
    for (x, &label) in features.iter().zip(teacher_labels) {
        if student.predict(x)? == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / features.len() as f64)
}

/// Fraction of active pool samples whose pseudo-label argmax matches the
/// reference class at the same pool index. `None` when nothing is active.
pub fn pseudo_label_accuracy(pool: &ProxyPool, reference: &[usize]) -> Option<f64> {
    let active = pool.active_indices();
    if active.is_empty() {
        return None;
    }
    let hits = active
        .iter()
        .filter(|&&i| argmax(&pool.pseudo_label[i]) == reference[i])
        .count();
    Some(hits as f64 / active.len() as f64)
}

/// Mean and sample standard deviation (`n - 1` denominator; 0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Observer that scores pseudo-labels against precomputed reference classes
/// (the teacher's argmax for every pool sample, obtained off-budget).
#[derive(Debug, Clone)]
pub struct PseudoLabelDiagnostics {
    reference: Vec<usize>,
    pub history: Vec<(usize, f64)>,
}

impl PseudoLabelDiagnostics {
    pub fn new(reference: Vec<usize>) -> Self {
        Self {
            reference,
            history: Vec::new(),
        }
    }

    pub fn last(&self) -> Option<f64> {
        self.history.last().map(|&(_, acc)| acc)
    }
}

impl RoundObserver for PseudoLabelDiagnostics {
    fn after_pseudo_label(&mut self, round: usize, pool: &ProxyPool) -> Option<f64> {
        let acc = pseudo_label_accuracy(pool, &self.reference)?;
        self.history.push((round, acc));
        Some(acc)
    }
}
