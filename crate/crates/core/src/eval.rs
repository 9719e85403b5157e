//! Confusion matrices, precision/recall/F1 (micro and macro), and
//! minority-class recall comparisons.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::model::{forward, ModelError, ModelParams};

#[derive(Debug)]
pub enum EvalError {
    LabelOutOfRange { label: usize, num_classes: usize },
    LengthMismatch { truth: usize, predicted: usize },
    EmptyMatrix,
    /// The two reports do not cover the same class set.
    ClassMismatch,
    Model(ModelError),
}

impl std::fmt::Display for EvalError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EvalError::LabelOutOfRange { label, num_classes } => {
                write!(f, "label {label} out of range for {num_classes} classes")
            }
            EvalError::LengthMismatch { truth, predicted } => {
                write!(f, "length mismatch: {truth} true labels vs {predicted} predictions")
            }
            EvalError::EmptyMatrix => write!(f, "confusion matrix has no entries"),
            EvalError::ClassMismatch => write!(f, "reports cover different class sets"),
            EvalError::Model(e) => write!(f, "model error: {e}"),
        }
    }
}

impl std::error::Error for EvalError {}

impl From<ModelError> for EvalError {
    fn from(e: ModelError) -> Self {
        EvalError::Model(e)
    }
}

/// Argmax class per sample; ties break toward the lowest class index.
pub fn predict(params: &ModelParams, ds: &Dataset) -> Result<Vec<usize>, EvalError> {
    let mut features = crate::numerics::Mat::zeros(ds.len(), ds.feature_dim());
    for (r, s) in ds.samples().iter().enumerate() {
        features.row_mut(r).copy_from_slice(&s.features);
    }
    let cache = forward(params, &features)?;
    let logits = cache.logits();
    Ok((0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Square count matrix, rows indexed by true class, columns by prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn at(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.num_classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.num_classes).map(|p| self.at(truth, p)).sum()
    }

    pub fn col_sum(&self, predicted: usize) -> u64 {
        (0..self.num_classes).map(|t| self.at(t, predicted)).sum()
    }

    pub fn to_rows(&self) -> Vec<Vec<u64>> {
        (0..self.num_classes)
            .map(|t| (0..self.num_classes).map(|p| self.at(t, p)).collect())
            .collect()
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<ConfusionMatrix, EvalError> {
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(EvalError::EmptyMatrix);
        }
        Ok(ConfusionMatrix { num_classes: n, counts: rows.iter().flatten().copied().collect() })
    }

    /// CSV rendering: a header of predicted class ids, then one row per true
    /// class led by its id.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true");
        for p in 0..self.num_classes {
            out.push_str(&format!(",{p}"));
        }
        out.push('\n');
        for t in 0..self.num_classes {
            out.push_str(&t.to_string());
            for p in 0..self.num_classes {
                out.push_str(&format!(",{}", self.at(t, p)));
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion_matrix(
    truth: &[usize],
    predicted: &[usize],
    num_classes: usize,
) -> Result<ConfusionMatrix, EvalError> {
    if truth.len() != predicted.len() {
        return Err(EvalError::LengthMismatch { truth: truth.len(), predicted: predicted.len() });
    }
    let mut counts = vec![0u64; num_classes * num_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= num_classes || p >= num_classes {
            return Err(EvalError::LabelOutOfRange { label: t.max(p), num_classes });
        }
        counts[t * num_classes + p] += 1;
    }
    Ok(ConfusionMatrix { num_classes, counts })
}

/// Per-class precision, recall, and F1 with the class's true-label count.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassMetrics {
    pub id: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
pub struct RunMeta {
    pub seed: u64,
    pub variant: String,
    pub fold: Option<usize>,
}

/// Full evaluation report; serializes to the report JSON schema.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub f1_micro: f64,
    pub f1_macro: f64,
    pub classes: Vec<ClassMetrics>,
    pub confusion: Vec<Vec<u64>>,
    /// Classes with zero support, excluded from the macro average.
    pub excluded_classes: Vec<usize>,
    #[serde(default)]
    pub run_meta: RunMeta,
}

impl MetricsReport {
    pub fn recall_of(&self, class_id: usize) -> Option<f64> {
        self.classes.iter().find(|c| c.id == class_id).map(|c| c.recall)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<MetricsReport, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Precision/recall/F1 per class plus micro and macro aggregates.
///
/// 0/0 ratios are defined as zero. Classes with zero support are excluded
/// from the macro average and listed in the report instead; micro F1 equals
/// accuracy under single-label evaluation.
pub fn f1_scores(cm: &ConfusionMatrix) -> Result<MetricsReport, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let c = cm.num_classes();
    let mut classes = Vec::with_capacity(c);
    let mut excluded = Vec::new();
    let mut macro_sum = 0.0;
    let mut macro_n = 0usize;
    let mut trace = 0u64;
    for k in 0..c {
        let tp = cm.at(k, k);
        trace += tp;
        let support = cm.row_sum(k);
        let predicted = cm.col_sum(k);
        let precision = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
        let recall = if support == 0 { 0.0 } else { tp as f64 / support as f64 };
        let f1 =
            if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        if support == 0 {
            excluded.push(k);
        } else {
            macro_sum += f1;
            macro_n += 1;
        }
        classes.push(ClassMetrics { id: k, precision, recall, f1, support });
    }
    Ok(MetricsReport {
        f1_micro: trace as f64 / total as f64,
        f1_macro: if macro_n == 0 { 0.0 } else { macro_sum / macro_n as f64 },
        classes,
        confusion: cm.to_rows(),
        excluded_classes: excluded,
        run_meta: RunMeta::default(),
    })
}

/// Convenience: predict, tabulate, and score a dataset in one call.
pub fn evaluate(
    params: &ModelParams,
    ds: &Dataset,
    meta: RunMeta,
) -> Result<MetricsReport, EvalError> {
    let predictions = predict(params, ds)?;
    let truth: Vec<usize> = ds.samples().iter().map(|s| s.class).collect();
    let num_classes = ds.num_classes().max(params.num_classes());
    let cm = confusion_matrix(&truth, &predictions, num_classes)?;
    let mut report = f1_scores(&cm)?;
    report.run_meta = meta;
    Ok(report)
}

/// Recall difference (a minus b) with both supports, for selected classes.
#[derive(Debug, Clone, PartialEq)]
pub struct RecallDelta {
    pub class_id: usize,
    pub delta: f64,
    pub support_a: u64,
    pub support_b: u64,
}

pub fn minority_report(
    a: &MetricsReport,
    b: &MetricsReport,
    class_ids: &[usize],
) -> Result<Vec<RecallDelta>, EvalError> {
    if a.classes.len() != b.classes.len() {
        return Err(EvalError::ClassMismatch);
    }
    class_ids
        .iter()
        .map(|&id| {
            let ca = a.classes.iter().find(|c| c.id == id).ok_or(EvalError::ClassMismatch)?;
            let cb = b.classes.iter().find(|c| c.id == id).ok_or(EvalError::ClassMismatch)?;
            Ok(RecallDelta {
                class_id: id,
                delta: ca.recall - cb.recall,
                support_a: ca.support,
                support_b: cb.support,
            })
        })
        .collect()
}
