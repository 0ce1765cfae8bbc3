use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{auprc, auroc, calibration_slope_intercept, Prediction};
use crate::error::{Error, Result};

pub const DEFAULT_BOOTSTRAP: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample standard deviation over replicates; zero for one replicate.
    pub sd: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Replicates on which the metric was defined.
    pub replicates: usize,
}

impl MetricSummary {
    pub fn of(values: &[f64]) -> Option<MetricSummary> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(MetricSummary {
            mean,
            sd,
            ci_low: percentile(&sorted, 0.025),
            ci_high: percentile(&sorted, 0.975),
            replicates: values.len(),
        })
    }
}

/// Linear-interpolation percentile of sorted data (`q` in `[0, 1]`).
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Class-stratified bootstrap: each replicate draws the positives and the
/// negatives separately with replacement, so both classes are always
/// present. Replicate `b` uses seed `seed + b`.
pub fn bootstrap_metrics(
    predictions: &[Prediction],
    replicates: usize,
    seed: u64,
) -> Result<BTreeMap<String, MetricSummary>> {
    let (pos, neg): (Vec<&Prediction>, Vec<&Prediction>) =
        predictions.iter().partition(|p| p.label);
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::UndefinedMetric("bootstrap"));
    }
    let mut values: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for b in 0..replicates {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(b as u64));
        let mut sample = Vec::with_capacity(predictions.len());
        for group in [&pos, &neg] {
            for _ in 0..group.len() {
                sample.push(group[rng.random_range(0..group.len())].clone());
            }
        }
        values.entry("auroc").or_default().push(auroc(&sample)?);
        values.entry("auprc").or_default().push(auprc(&sample)?);
        if let Ok(c) = calibration_slope_intercept(&sample) {
            values.entry("calibration_slope").or_default().push(c.slope);
            values.entry("calibration_intercept").or_default().push(c.intercept);
        }
    }
    Ok(values
        .into_iter()
        .filter_map(|(k, v)| MetricSummary::of(&v).map(|s| (k.to_string(), s)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::sigmoid;

    fn calibrated(n: usize, seed: u64) -> Vec<Prediction> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let eta: f64 = rng.random_range(-2.5..1.5);
                let y = rng.random::<f64>() < sigmoid(eta);
                Prediction::from_linear(format!("P{i:05}"), eta, y)
            })
            .collect()
    }

    #[test]
    fn single_replicate_has_zero_spread() {
        let p = calibrated(300, 1);
        let s = bootstrap_metrics(&p, 1, 9).unwrap();
        let a = s["auroc"];
        assert_eq!(a.sd, 0.0);
        assert_eq!(a.ci_low, a.mean);
        assert_eq!(a.ci_high, a.mean);
        assert_eq!(a.replicates, 1);
    }

    #[test]
    fn same_seed_same_summary() {
        let p = calibrated(300, 2);
        assert_eq!(bootstrap_metrics(&p, 50, 4).unwrap(), bootstrap_metrics(&p, 50, 4).unwrap());
        assert_ne!(bootstrap_metrics(&p, 50, 4).unwrap(), bootstrap_metrics(&p, 50, 5).unwrap());
    }

    #[test]
    fn intervals_are_ordered_and_usually_cover_the_point_estimate() {
        let mut covered = 0;
        let runs = 20;
        for r in 0..runs {
            let p = calibrated(400, 100 + r);
            let point = auroc(&p).unwrap();
            let s = bootstrap_metrics(&p, 100, r).unwrap();
            for m in s.values() {
                assert!(m.ci_low <= m.mean && m.mean <= m.ci_high, "{m:?}");
            }
            let a = s["auroc"];
            if a.ci_low <= point && point <= a.ci_high {
                covered += 1;
            }
        }
        assert!(covered as f64 >= 0.9 * runs as f64, "{covered}/{runs}");
    }

    #[test]
    fn single_class_is_rejected() {
        let p = vec![Prediction::from_linear("A", 0.1, true)];
        assert!(bootstrap_metrics(&p, 10, 0).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 0.5), 3.0);
        assert_eq!(percentile(&v, 0.025), 1.1);
        assert_eq!(percentile(&v, 1.0), 5.0);
    }
}
