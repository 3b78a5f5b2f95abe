//! One CSV row per run, plus per-variant aggregates.

use std::io::{Read, Write};

use extraction_lab::eval::mean_std;
use extraction_lab::{AttackMode, LabelMode};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowKind {
    Detail,
    Aggregate,
}

/// A CSV record. Detail rows describe one run; aggregate rows hold the mean
/// (in the accuracy columns) and sample standard deviation over the
/// successful detail rows of one (budget, mode, label mode) variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub kind: RowKind,
    pub per_class_budget: usize,
    pub mode: AttackMode,
    pub label_mode: LabelMode,
    pub seed: Option<u64>,
    pub agreement_accuracy: Option<f64>,
    pub agreement_accuracy_std: Option<f64>,
    pub pseudo_label_accuracy: Option<f64>,
    pub pseudo_label_accuracy_std: Option<f64>,
    pub calls_used: usize,
    /// Only filled when timing was requested; keeps sweep output reproducible otherwise.
    pub wall_ms: Option<f64>,
    /// `ok`, `failed: <reason>` for detail rows; `ok` or `partial k/m` for aggregates.
    pub status: String,
}

impl MetricsRow {
    pub fn run_id(per_class_budget: usize, mode: AttackMode, label_mode: LabelMode, seed: Option<u64>) -> String {
        match seed {
            Some(s) => format!("b{per_class_budget}-{mode}-{label_mode}-s{s}"),
            None => format!("b{per_class_budget}-{mode}-{label_mode}-mean"),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Aggregate rows, one per distinct (budget, mode, label mode) in first-seen order.
pub fn aggregate(details: &[MetricsRow]) -> Vec<MetricsRow> {
    let mut keys: Vec<(usize, AttackMode, LabelMode)> = Vec::new();
    for r in details.iter().filter(|r| r.kind == RowKind::Detail) {
        let key = (r.per_class_budget, r.mode, r.label_mode);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(budget, mode, label_mode)| {
            let group: Vec<&MetricsRow> = details
                .iter()
                .filter(|r| {
                    r.kind == RowKind::Detail && r.per_class_budget == budget && r.mode == mode && r.label_mode == label_mode
                })
                .collect();
            let ok: Vec<&&MetricsRow> = group.iter().filter(|r| r.is_ok()).collect();
            let acc: Vec<f64> = ok.iter().filter_map(|r| r.agreement_accuracy).collect();
            let pl: Vec<f64> = ok.iter().filter_map(|r| r.pseudo_label_accuracy).collect();
            let stats = |v: &[f64]| (!v.is_empty()).then(|| mean_std(v));
            let (acc_mean, acc_std) = stats(&acc).unzip();
            let (pl_mean, pl_std) = stats(&pl).unzip();
            MetricsRow {
                run_id: MetricsRow::run_id(budget, mode, label_mode, None),
                kind: RowKind::Aggregate,
                per_class_budget: budget,
                mode,
                label_mode,
                seed: None,
                agreement_accuracy: acc_mean,
                agreement_accuracy_std: acc_std,
                pseudo_label_accuracy: pl_mean,
                pseudo_label_accuracy_std: pl_std,
                calls_used: ok.iter().map(|r| r.calls_used).max().unwrap_or(0),
                wall_ms: None,
                status: if ok.len() == group.len() {
                    "ok".to_owned()
                } else {
                    format!("partial {}/{}", ok.len(), group.len())
                },
            }
        })
        .collect()
}

pub fn write_csv<W: Write>(out: W, rows: &[MetricsRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_csv_string(rows: &[MetricsRow]) -> String {
    let mut buf = Vec::new();
    write_csv(&mut buf, rows).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("csv output is utf-8")
}

pub fn read_csv<R: Read>(input: R) -> csv::Result<Vec<MetricsRow>> {
    csv::Reader::from_reader(input).deserialize().collect()
}
