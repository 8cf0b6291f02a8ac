use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 0.1, beta1: 0.9, beta2: 0.9, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Invalid(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Invalid("adam epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }
}

/// One bias-corrected Adam update. Entries with `mask[i] == false` are left
/// untouched, moments included. A non-finite gradient rejects the whole step.
pub fn adam_step(params: &mut [f64], grads: &[f64], mask: &[bool], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    let n = params.len();
    if grads.len() != n || mask.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Precondition(format!(
            "adam shapes disagree: params {n}, grads {}, mask {}, state {}",
            grads.len(),
            mask.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite { context: format!("gradient of parameter {i}") });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &[true, true], &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &[true], &mut s, &AdamConfig::default()).unwrap();
        assert!((p[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15, "{}", p[0]);
    }

    #[test]
    fn masked_entry_untouched() {
        let mut p = vec![0.5, 0.5];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[3.0, 3.0], &[false, true], &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(p[0], 0.5);
        assert_eq!(s.m[0], 0.0);
        assert!(p[1] < 0.5);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = vec![0.5];
        let mut s = AdamState::new(1);
        assert!(adam_step(&mut p, &[f64::NAN], &[true], &mut s, &AdamConfig::default()).is_err());
        assert_eq!((p[0], s.step), (0.5, 0));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![0.5];
        let mut s = AdamState::new(1);
        assert!(adam_step(&mut p, &[1.0, 2.0], &[true], &mut s, &AdamConfig::default()).is_err());
    }
}
