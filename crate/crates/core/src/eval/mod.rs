//! Classification metrics, one-vs-rest ROC, Grad-CAM and report files.

mod cam;
mod report;

use serde::{Deserialize, Serialize};

use crate::exec::{self, ExecError, ForwardMode};
use crate::graph::ModelGraph;
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

pub use crate::loss::argmax_rows;
pub use cam::{grad_cam, grad_cam_batch, CamError};
pub use report::{emit_report, EpochRecord, EvalReport, ReportError, REPORT_SCHEMA};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("{pred} predictions but {truth} labels")]
    Length { pred: usize, truth: usize },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("score row {row} has {len} entries, expected {classes}")]
    ScoreWidth { row: usize, len: usize, classes: usize },
}

/// Rows are actual classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|k| self.counts[k][k]).sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        self.counts.iter().map(|r| r[k]).sum()
    }
}

fn check_label(label: usize, classes: usize) -> Result<(), MetricError> {
    if label >= classes {
        return Err(MetricError::Label { label, classes });
    }
    Ok(())
}

pub fn confusion(pred: &[usize], truth: &[usize], classes: usize) -> Result<ConfusionMatrix, MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::Length {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    let mut counts = vec![vec![0u64; classes]; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        check_label(p, classes)?;
        check_label(t, classes)?;
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Nothing was predicted as this class; precision is reported as 0.
    pub precision_undefined: bool,
    /// The class has no samples; recall is reported as 0.
    pub recall_undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn prf1(m: &ConfusionMatrix) -> Metrics {
    let per_class: Vec<ClassMetrics> = (0..m.classes())
        .map(|k| {
            let tp = m.counts[k][k];
            let (precision, precision_undefined) = ratio(tp, m.col_sum(k));
            let (recall, recall_undefined) = ratio(tp, m.row_sum(k));
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                support: m.row_sum(k),
                precision_undefined,
                recall_undefined,
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / per_class.len().max(1) as f64;
    Metrics {
        accuracy: ratio(m.trace(), m.total()).0,
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        per_class,
    }
}

/// One-vs-rest ROC of a class. `points` run from (0, 0) to (1, 1) as
/// `(fpr, tpr)`, one step per distinct score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roc {
    /// `None` for classes without positives or without negatives.
    pub per_class: Vec<Option<RocCurve>>,
    /// Mean AUC over the classes that have a curve.
    pub macro_auc: Option<f64>,
}

/// ROC curve of binary `positive` flags under `scores` (higher means more
/// positive). Equal scores form a single diagonal step.
pub fn roc_curve(scores: &[f64], positive: &[bool]) -> Option<RocCurve> {
    let pos = positive.iter().filter(|&&p| p).count();
    let neg = positive.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let (x0, y0) = *points.last().expect("starts non-empty");
        let p = (fp as f64 / neg as f64, tp as f64 / pos as f64);
        auc += (p.0 - x0) * (p.1 + y0) / 2.0;
        points.push(p);
    }
    Some(RocCurve { points, auc })
}

/// One-vs-rest curves from an `(N, K)` score matrix.
pub fn roc_auc(scores: &Tensor, truth: &[usize]) -> Result<Roc, MetricError> {
    let (n, k) = (scores.dims()[0], scores.dims().get(1).copied().unwrap_or(0));
    if n != truth.len() {
        return Err(MetricError::Length {
            pred: n,
            truth: truth.len(),
        });
    }
    for &t in truth {
        check_label(t, k)?;
    }
    let per_class: Vec<Option<RocCurve>> = (0..k)
        .map(|c| {
            let col: Vec<f64> = (0..n).map(|i| scores.data()[i * k + c]).collect();
            let pos: Vec<bool> = truth.iter().map(|&t| t == c).collect();
            roc_curve(&col, &pos)
        })
        .collect();
    let aucs: Vec<f64> = per_class.iter().flatten().map(|c| c.auc).collect();
    let macro_auc = (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64);
    Ok(Roc { per_class, macro_auc })
}

/// Softmax outputs of the graph over `images`, evaluated in inference mode
/// in chunks of `batch_size`.
pub fn predict(
    graph: &ModelGraph,
    params: &ParamStore,
    images: &[Tensor],
    batch_size: usize,
) -> Result<Tensor, ExecError> {
    if images.is_empty() {
        return Err(ExecError::EmptyBatch);
    }
    let mut rows = Vec::new();
    let mut k = 0;
    for chunk in images.chunks(batch_size.max(1)) {
        let refs: Vec<&Tensor> = chunk.iter().collect();
        let tape = exec::forward(graph, params, &Tensor::stack(&refs)?, ForwardMode::INFERENCE)?;
        let out = tape.output(graph);
        k = out.dims()[1];
        rows.extend_from_slice(out.data());
    }
    Ok(Tensor::from_vec(Shape::new(vec![images.len(), k])?, rows)?)
}

#[cfg(test)]
mod tests;
