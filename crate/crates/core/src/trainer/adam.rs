use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gradients, Matrix, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: IndexMap<String, Matrix>,
    pub v: IndexMap<String, Matrix>,
    pub t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update. Gradients are checked for finiteness
/// before anything is modified.
pub fn adam_step(params: &mut Parameters, grads: &Gradients, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    for (name, g) in grads.iter() {
        if !g.all_finite() {
            return Err(Error::NonFinite(name.clone()));
        }
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape(format!("gradient for `{name}` has shape {:?}, parameter {:?}", g.shape(), p.shape())));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads.iter() {
        let m = state.m.entry(name.clone()).or_insert_with(|| Matrix::zeros(g.rows, g.cols));
        let v = state.v.entry(name.clone()).or_insert_with(|| Matrix::zeros(g.rows, g.cols));
        let p = params.get_mut(name).expect("checked above");
        for i in 0..g.data.len() {
            let gi = g.data[i];
            m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * gi;
            v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m.data[i] / bc1;
            let v_hat = v.data[i] / bc2;
            p.data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(w: f64) -> Parameters {
        let mut p = Parameters::new();
        p.insert("w", Matrix::filled(1, 1, w)).unwrap();
        p
    }

    fn grad(g: f64) -> Gradients {
        Gradients([("w".to_string(), Matrix::filled(1, 1, g))].into_iter().collect())
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = scalar(3.0);
        let mut s = AdamState::new();
        adam_step(&mut p, &grad(0.0), &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(p.get("w").unwrap().data[0], 3.0);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_bias_corrections_cancel() {
        let cfg = AdamConfig { lr: 0.01, ..Default::default() };
        let mut p = scalar(0.0);
        let mut s = AdamState::new();
        adam_step(&mut p, &grad(1.0), &mut s, &cfg).unwrap();
        let expected = -0.01 / (1.0 + 1e-8);
        assert!((p.get("w").unwrap().data[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn converges_on_quadratic_bowl() {
        let cfg = AdamConfig { lr: 0.05, ..Default::default() };
        let w0 = 2.0;
        let mut p = scalar(w0);
        let mut s = AdamState::new();
        let mut trace = Vec::new();
        for _ in 0..200 {
            let w = p.get("w").unwrap().data[0];
            adam_step(&mut p, &grad(2.0 * w), &mut s, &cfg).unwrap();
            trace.push(p.get("w").unwrap().data[0].abs());
        }
        // monotone over the approach phase, before Adam's momentum oscillation near 0
        let approach = trace.iter().take_while(|&&w| w > 0.2).count();
        assert!(approach > 10);
        assert!(trace[..approach].windows(2).all(|w| w[1] < w[0]));
        assert!(*trace.last().unwrap() < 0.1 * w0);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut p = scalar(1.0);
        let mut s = AdamState::new();
        let err = adam_step(&mut p, &grad(f64::INFINITY), &mut s, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(s.t, 0);
        assert_eq!(p.get("w").unwrap().data[0], 1.0);
    }
}
