use serde::Serialize;

use super::{class_counts, Prediction};
use crate::baselines::{logit_fit, LogitOptions};
use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 10;

/// Logistic calibration of a set of predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Calibration {
    /// Coefficient of the linear predictor when regressing outcomes on it.
    pub slope: f64,
    pub slope_se: f64,
    /// Calibration-in-the-large: the intercept with the slope fixed at one.
    pub intercept: f64,
}

impl Calibration {
    /// Wald statistic for the hypothesis that the slope is one.
    pub fn slope_z(&self) -> f64 {
        (self.slope - 1.0) / self.slope_se
    }
}

fn labels_of(predictions: &[Prediction]) -> Vec<f64> {
    predictions.iter().map(|p| f64::from(u8::from(p.label))).collect()
}

fn check_calibratable(predictions: &[Prediction], what: &'static str) -> Result<()> {
    let (pos, neg) = class_counts(predictions.iter().map(|p| p.label));
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(what));
    }
    let first = predictions[0].linear_predictor;
    if predictions.iter().all(|p| p.linear_predictor == first) {
        return Err(Error::DegenerateCalibration);
    }
    Ok(())
}

pub fn calibration_slope_intercept(predictions: &[Prediction]) -> Result<Calibration> {
    check_calibratable(predictions, "calibration slope")?;
    let y = labels_of(predictions);
    let x: Vec<Vec<f64>> = predictions.iter().map(|p| vec![p.linear_predictor]).collect();
    let options = LogitOptions::default();
    let slope_fit = logit_fit(&x, &y, None, &options)?;
    let offset: Vec<f64> = predictions.iter().map(|p| p.linear_predictor).collect();
    let empty = vec![Vec::new(); predictions.len()];
    let citl = logit_fit(&empty, &y, Some(&offset), &options)?;
    Ok(Calibration {
        slope: slope_fit.coefficients[0],
        slope_se: slope_fit.coefficient_se(0),
        intercept: citl.intercept,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveBin {
    pub bin: usize,
    pub mean_pred: f64,
    pub obs_rate: f64,
    pub count: usize,
}

/// Equal-width probability bins; empty bins are left out.
#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct CalibrationCurve {
    pub bins: Vec<CurveBin>,
}

impl CalibrationCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,mean_pred,obs_rate,count\n");
        for b in &self.bins {
            out.push_str(&format!("{},{},{},{}\n", b.bin, b.mean_pred, b.obs_rate, b.count));
        }
        out
    }

    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }
}

pub fn calibration_curve(predictions: &[Prediction], n_bins: usize) -> CalibrationCurve {
    let n_bins = n_bins.max(1);
    let mut sums = vec![(0.0, 0usize, 0usize); n_bins];
    for p in predictions {
        let b = ((p.probability * n_bins as f64) as usize).min(n_bins - 1);
        sums[b].0 += p.probability;
        sums[b].1 += usize::from(p.label);
        sums[b].2 += 1;
    }
    let bins = sums
        .into_iter()
        .enumerate()
        .filter(|(_, s)| s.2 > 0)
        .map(|(bin, (psum, events, count))| CurveBin {
            bin,
            mean_pred: psum / count as f64,
            obs_rate: events as f64 / count as f64,
            count,
        })
        .collect();
    CalibrationCurve { bins }
}

/// Logistic recalibration `eta' = a + b * eta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Recalibrator {
    pub a: f64,
    pub b: f64,
}

/// Fits outcome on linear predictor over the recalibration set.
pub fn recalibrate_fit(predictions: &[Prediction]) -> Result<Recalibrator> {
    check_calibratable(predictions, "recalibration")?;
    let y = labels_of(predictions);
    let x: Vec<Vec<f64>> = predictions.iter().map(|p| vec![p.linear_predictor]).collect();
    let fit = logit_fit(&x, &y, None, &LogitOptions::default())?;
    Ok(Recalibrator {
        a: fit.intercept,
        b: fit.coefficients[0],
    })
}

pub fn recalibrate_apply(recal: &Recalibrator, predictions: &[Prediction]) -> Vec<Prediction> {
    predictions
        .iter()
        .map(|p| {
            if recal.a == 0.0 && recal.b == 1.0 {
                return p.clone();
            }
            Prediction::from_linear(
                p.patient_id.clone(),
                recal.a + recal.b * p.linear_predictor,
                p.label,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::sigmoid;
    use crate::metrics::auroc;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Predictions with linear predictors spread over `[-3, 1]` and labels
    /// drawn from `sigmoid(truth(eta))`.
    fn simulate(n: usize, seed: u64, truth: impl Fn(f64) -> f64) -> Vec<Prediction> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let eta = rng.random_range(-3.0..1.0);
                let y = rng.random::<f64>() < sigmoid(truth(eta));
                Prediction::from_linear(format!("P{i:06}"), eta, y)
            })
            .collect()
    }

    #[test]
    fn calibrated_predictions_have_unit_slope() {
        let p = simulate(20_000, 1, |e| e);
        let c = calibration_slope_intercept(&p).unwrap();
        assert!((c.slope - 1.0).abs() < 0.05, "{c:?}");
        assert!(c.intercept.abs() < 0.05, "{c:?}");
    }

    #[test]
    fn underconfident_predictions_have_slope_two() {
        let p = simulate(20_000, 2, |e| 2.0 * e);
        let c = calibration_slope_intercept(&p).unwrap();
        assert!((c.slope - 2.0).abs() < 0.1, "{c:?}");
    }

    #[test]
    fn constant_predictions_are_degenerate() {
        let p: Vec<Prediction> = (0..10)
            .map(|i| Prediction::from_probability(format!("P{i}"), 0.3, i % 2 == 0))
            .collect();
        assert!(matches!(calibration_slope_intercept(&p), Err(Error::DegenerateCalibration)));
    }

    #[test]
    fn curve_of_calibrated_data_tracks_diagonal() {
        let p = simulate(20_000, 3, |e| e);
        let curve = calibration_curve(&p, DEFAULT_BINS);
        assert_eq!(curve.total(), p.len());
        for b in &curve.bins {
            let se = (b.mean_pred * (1.0 - b.mean_pred) / b.count as f64).sqrt();
            assert!((b.obs_rate - b.mean_pred).abs() <= 3.0 * se, "{b:?}");
        }
    }

    #[test]
    fn single_bin_curve() {
        let p: Vec<Prediction> = [0.31, 0.35, 0.39]
            .iter()
            .enumerate()
            .map(|(i, &q)| Prediction::from_probability(format!("P{i}"), q, i == 0))
            .collect();
        let curve = calibration_curve(&p, 10);
        assert_eq!(curve.bins.len(), 1);
        assert_eq!(curve.bins[0].bin, 3);
        assert_eq!(curve.bins[0].count, 3);
        assert!(curve.to_csv().starts_with("bin,mean_pred,obs_rate,count\n3,"));
    }

    #[test]
    fn probability_one_lands_in_last_bin() {
        let p = vec![Prediction {
            patient_id: "P".into(),
            probability: 1.0,
            linear_predictor: 40.0,
            label: true,
        }];
        assert_eq!(calibration_curve(&p, 10).bins[0].bin, 9);
    }

    #[test]
    fn recalibration_of_calibrated_inputs_is_near_identity() {
        let p = simulate(20_000, 4, |e| e);
        let r = recalibrate_fit(&p).unwrap();
        assert!(r.a.abs() < 0.06 && (r.b - 1.0).abs() < 0.05, "{r:?}");
    }

    #[test]
    fn recalibration_halves_doubled_predictors() {
        let truth = simulate(20_000, 5, |e| e);
        let doubled: Vec<Prediction> = truth
            .iter()
            .map(|p| Prediction::from_linear(p.patient_id.clone(), 2.0 * p.linear_predictor, p.label))
            .collect();
        let r = recalibrate_fit(&doubled).unwrap();
        assert!((r.b - 0.5).abs() < 0.03, "{r:?}");
    }

    #[test]
    fn recalibration_needs_both_classes() {
        let p: Vec<Prediction> = (0..5)
            .map(|i| Prediction::from_linear(format!("P{i}"), i as f64, true))
            .collect();
        assert!(matches!(recalibrate_fit(&p), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn apply_examples() {
        let p = simulate(200, 6, |e| e);
        let same = recalibrate_apply(&Recalibrator { a: 0.0, b: 1.0 }, &p);
        assert_eq!(same, p);
        let moved = recalibrate_apply(&Recalibrator { a: -0.4, b: 0.7 }, &p);
        assert_eq!(auroc(&moved).unwrap(), auroc(&p).unwrap());
        let one = [Prediction::from_linear("P", 2.0, true)];
        let r = recalibrate_apply(&Recalibrator { a: -1.0, b: 0.5 }, &one);
        assert_eq!(r[0].probability, 0.5);
        assert_eq!(r[0].linear_predictor, 0.0);
    }

    #[test]
    fn in_sample_recalibration_is_a_fixed_point() {
        let p = simulate(20_000, 7, |e| 0.6 * e - 0.5);
        let r = recalibrate_fit(&p).unwrap();
        let c = calibration_slope_intercept(&recalibrate_apply(&r, &p)).unwrap();
        assert!((c.slope - 1.0).abs() < 0.02, "{c:?}");
    }
}
