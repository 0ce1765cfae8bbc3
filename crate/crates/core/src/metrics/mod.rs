//! Discrimination, calibration, recalibration, bootstrap summaries and
//! subgroup breakdowns of binary risk predictions.

mod bootstrap;
mod calibration;
mod report;

use std::cmp::Ordering;

use serde::Serialize;

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};

pub use bootstrap::{bootstrap_metrics, percentile, MetricSummary, DEFAULT_BOOTSTRAP};
pub use calibration::{
    calibration_curve, calibration_slope_intercept, recalibrate_apply, recalibrate_fit, Calibration,
    CalibrationCurve, CurveBin, Recalibrator, DEFAULT_BINS,
};
pub use report::{
    evaluate, stratified_evaluation, AgeBand, EvalOptions, MetricsReport, Subgroup,
};

/// One patient's model output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub patient_id: String,
    /// Always `sigmoid(linear_predictor)`.
    pub probability: f64,
    pub linear_predictor: f64,
    pub label: bool,
}

impl Prediction {
    pub fn from_linear(patient_id: impl Into<String>, linear_predictor: f64, label: bool) -> Self {
        Prediction {
            patient_id: patient_id.into(),
            probability: sigmoid(linear_predictor),
            linear_predictor,
            label,
        }
    }

    /// From a probability in `(0, 1)`; the linear predictor is its logit.
    pub fn from_probability(patient_id: impl Into<String>, probability: f64, label: bool) -> Self {
        Prediction {
            patient_id: patient_id.into(),
            probability,
            linear_predictor: (probability / (1.0 - probability)).ln(),
            label,
        }
    }
}

/// Writes predictions as `patient_id,probability,linear_predictor,label`.
pub fn predictions_csv(predictions: &[Prediction]) -> String {
    let mut out = String::from("patient_id,probability,linear_predictor,label\n");
    for p in predictions {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.patient_id,
            p.probability,
            p.linear_predictor,
            u8::from(p.label)
        ));
    }
    out
}

/// Parses the output of [`predictions_csv`].
pub fn parse_predictions_csv(text: &str) -> Result<Vec<Prediction>> {
    let mut lines = text.lines();
    if lines.next() != Some("patient_id,probability,linear_predictor,label") {
        return Err(Error::Parse {
            file: "predictions".into(),
            line: 1,
            column: 1,
            message: "unexpected header".into(),
        });
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = |column: usize, message: &str| Error::Parse {
                file: "predictions".into(),
                line: i + 2,
                column,
                message: message.into(),
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad(1, "expected 4 fields"));
            }
            let eta: f64 = f[2].parse().map_err(|_| bad(3, "bad linear predictor"))?;
            let label = match f[3] {
                "0" => false,
                "1" => true,
                _ => return Err(bad(4, "label must be 0 or 1")),
            };
            Ok(Prediction::from_linear(f[0], eta, label))
        })
        .collect()
}

fn class_counts(labels: impl Iterator<Item = bool>) -> (usize, usize) {
    labels.fold((0, 0), |(p, n), y| if y { (p + 1, n) } else { (p, n + 1) })
}

/// Mann-Whitney AUROC of `scores`: concordant pairs plus half the tied
/// pairs, over positives times negatives.
pub fn auroc_scores(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (n_pos, n_neg) = class_counts(labels.iter().copied());
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUROC"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of midranks (1-based, doubled to stay integral) over positives.
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank2 = (i + 1 + j + 1) as u64;
        let pos = order[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        rank_sum2 += pos * midrank2;
        i = j + 1;
    }
    let (p, n) = (n_pos as u64, n_neg as u64);
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / 2.0 / (p * n) as f64)
}

/// AUROC ranked by linear predictor.
pub fn auroc(predictions: &[Prediction]) -> Result<f64> {
    let scores: Vec<f64> = predictions.iter().map(|p| p.linear_predictor).collect();
    let labels: Vec<bool> = predictions.iter().map(|p| p.label).collect();
    auroc_scores(&scores, &labels)
}

/// Average precision: mean over positives of the precision at that
/// positive's rank, ranking by descending linear predictor and then
/// ascending patient id.
pub fn auprc(predictions: &[Prediction]) -> Result<f64> {
    let (n_pos, _) = class_counts(predictions.iter().map(|p| p.label));
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("AUPRC"));
    }
    let mut order: Vec<&Prediction> = predictions.iter().collect();
    order.sort_by(|a, b| rank_order(a, b));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, p) in order.iter().enumerate() {
        if p.label {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / n_pos as f64)
}

fn rank_order(a: &Prediction, b: &Prediction) -> Ordering {
    b.linear_predictor
        .total_cmp(&a.linear_predictor)
        .then_with(|| a.patient_id.cmp(&b.patient_id))
}

/// Fraction of predictions on the right side of probability 0.5.
pub fn accuracy(predictions: &[Prediction]) -> f64 {
    if predictions.is_empty() {
        return f64::NAN;
    }
    let right = predictions
        .iter()
        .filter(|p| (p.linear_predictor > 0.0) == p.label)
        .count();
    right as f64 / predictions.len() as f64
}
