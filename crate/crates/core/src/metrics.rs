//! Binary classification metrics. The positive class is COVID (label 1).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataio::{to_matrix, Sample};
use crate::error::{Error, Result};
use crate::nnkernel::Mlp;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            (self.tp + self.tn) as f64 / self.total() as f64
        }
    }

    /// `[[tn, fp], [fn, tp]]`: rows are true class, columns predicted class.
    pub fn as_table(&self) -> [[u64; 2]; 2] {
        [[self.tn, self.fp], [self.fn_, self.tp]]
    }
}

pub fn confusion(predictions: &[usize], labels: &[usize]) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::dims(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Empty("prediction vector"));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p, y) {
            (1, 1) => cm.tp += 1,
            (1, 0) => cm.fp += 1,
            (0, 0) => cm.tn += 1,
            (0, 1) => cm.fn_ += 1,
            _ => return Err(Error::LabelOutOfRange { label: p.max(y) }),
        }
    }
    Ok(cm)
}

/// Scores the model's argmax predictions on `samples`.
pub fn evaluate(model: &Mlp, samples: &[Sample]) -> Result<ConfusionMatrix> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let (x, y) = to_matrix(samples);
    confusion(&model.predict(x.view())?, &y)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ca: f64,
    pub pre: f64,
    pub rec: f64,
    pub f1: f64,
    /// Set when a ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

fn ratio(num: u64, den: u64, degenerate: &mut bool) -> f64 {
    if den == 0 {
        *degenerate = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn scores(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    if cm.total() == 0 {
        return Err(Error::Empty("confusion matrix"));
    }
    let mut degenerate = false;
    let ca = ratio(cm.tp + cm.tn, cm.total(), &mut degenerate);
    let pre = ratio(cm.tp, cm.tp + cm.fp, &mut degenerate);
    let rec = ratio(cm.tp, cm.tp + cm.fn_, &mut degenerate);
    let f1 = if pre + rec == 0.0 {
        degenerate = true;
        0.0
    } else {
        2.0 * pre * rec / (pre + rec)
    };
    Ok(MetricsReport {
        ca,
        pre,
        rec,
        f1,
        degenerate,
    })
}

/// One line per hospital, columns `Hospital | CA (%) | F1 (0..1) | PRE (%) | REC (%)`.
pub fn render_hospital_table(rows: &[(u16, MetricsReport)]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>8} | {:>6} | {:>9} | {:>7} | {:>7}",
        "Hospital", "CA (%)", "F1 (0..1)", "PRE (%)", "REC (%)"
    );
    let _ = writeln!(out, "{}", "-".repeat(50));
    for (id, m) in rows {
        let _ = writeln!(
            out,
            "{:>8} | {:>6.1} | {:>9.2} | {:>7.1} | {:>7.1}",
            id,
            m.ca * 100.0,
            m.f1,
            m.pre * 100.0,
            m.rec * 100.0
        );
    }
    out
}
