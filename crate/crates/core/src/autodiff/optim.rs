use std::collections::BTreeMap;

use super::{Array, Gradients, Params};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment accumulators per parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    moments: BTreeMap<String, (Array, Array)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step(
    params: &mut Params,
    grads: &Gradients,
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params
            .get(name)
            .ok_or_else(|| Error::Internal(format!("gradient for unknown parameter '{name}'")))?;
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "parameter '{name}' is {:?}, gradient is {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for (name, g) in grads.iter() {
        let p = params.get_mut(name).expect("checked above");
        let (m, v) = state
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (g.zeros_like(), g.zeros_like()));
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = config.beta1 * *m + (1.0 - config.beta1) * g;
            *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, values: Vec<f64>) -> Params {
        let mut p = Params::new();
        p.insert(name, Array::vector(values));
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = one("w", vec![0.5, -2.0, 3.0]);
        let g = one("w", vec![1.0, 1.0, 1.0]);
        let mut s = AdamState::new();
        adam_step(&mut p, &g, &mut s, &AdamConfig::default()).unwrap();
        for (after, before) in p.get("w").unwrap().data().iter().zip([0.5, -2.0, 3.0]) {
            assert!(((before - after) - 1e-3).abs() < 1e-6);
        }
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = one("w", vec![0.5, -2.0]);
        let g = one("w", vec![0.0, 0.0]);
        let mut s = AdamState::new();
        adam_step(&mut p, &g, &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.5, -2.0]);
    }

    #[test]
    fn two_steps_follow_recurrence() {
        // hand-evaluated: m1 = 0.1, v1 = 0.001, m2 = 0.19, v2 = 0.001999
        let c = AdamConfig::default();
        let mut p = one("w", vec![1.0]);
        let g = one("w", vec![1.0]);
        let mut s = AdamState::new();
        adam_step(&mut p, &g, &mut s, &c).unwrap();
        adam_step(&mut p, &g, &mut s, &c).unwrap();
        let step1 = (0.1 / 0.1) / ((0.001f64 / 0.001).sqrt() + 1e-8);
        let step2 = (0.19 / 0.19) / ((0.001999f64 / 0.001999).sqrt() + 1e-8);
        let expected = 1.0 - 1e-3 * step1 - 1e-3 * step2;
        assert!((p.get("w").unwrap().item() - expected).abs() < 1e-15);
        let m2: f64 = 0.9 * (0.1) + 0.1;
        let v2: f64 = 0.999 * 0.001 + 0.001;
        assert!((m2 - 0.19).abs() < 1e-15 && (v2 - 0.001999).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = one("w", vec![1.0, 2.0]);
        let g = one("w", vec![1.0]);
        assert!(adam_step(&mut p, &g, &mut AdamState::new(), &AdamConfig::default()).is_err());
    }
}
