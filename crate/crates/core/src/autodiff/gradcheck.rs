use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Gradients, Params};
use crate::error::{Error, Result};

/// Arrays larger than this are checked on a random sample of elements.
const FULL_CHECK_LIMIT: usize = 400;
const SAMPLE_SIZE: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Worst relative error per parameter array.
    pub per_param: BTreeMap<String, f64>,
    pub checked: usize,
}

/// Relative error with the denominator floored at `1e-8`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients against central differences
/// `(f(x + eps) - f(x - eps)) / (2 eps)`.
///
/// `loss_fn` must be deterministic and return the loss and its gradients.
/// Every element of small arrays is checked; larger arrays are sampled.
pub fn finite_difference_check<F>(params: &Params, eps: f64, seed: u64, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&Params) -> Result<(f64, Gradients)>,
{
    let (_, analytic) = loss_fn(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut per_param = BTreeMap::new();
    let mut checked = 0;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name).map_or(0, |a| a.len());
        let grad = analytic.get(&name);
        let indices: Vec<usize> = if n <= FULL_CHECK_LIMIT {
            (0..n).collect()
        } else {
            let mut idx = sample(&mut rng, n, SAMPLE_SIZE).into_vec();
            idx.sort_unstable();
            idx
        };
        let mut worst: f64 = 0.0;
        for i in indices {
            let original = params.get(&name).unwrap().data()[i];
            probe.get_mut(&name).unwrap().data_mut()[i] = original + eps;
            let (plus, _) = loss_fn(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = original - eps;
            let (minus, _) = loss_fn(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.map_or(0.0, |g| g.data()[i]);
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Internal(format!(
                    "non-finite gradient for '{name}'[{i}]"
                )));
            }
            worst = worst.max(relative_error(a, numeric));
            checked += 1;
        }
        per_param.insert(name, worst);
    }
    let max_rel_error = per_param.values().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_param,
        checked,
    })
}
