use serde::{Deserialize, Serialize};

use super::Param;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update at step `t` (1-based). Gradients are zeroed afterwards.
pub fn adam_step(params: &mut [Param], cfg: &AdamConfig, t: u64) -> Result<()> {
    if t == 0 {
        return Err(Error::invalid("adam step counter must start at 1"));
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for p in params.iter_mut() {
        let w = p.value.as_mut_slice();
        let g = p.grad.as_mut_slice();
        let m = p.m.as_mut_slice();
        let v = p.v.as_mut_slice();
        for i in 0..w.len() {
            let gi = g[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            w[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            g[i] = 0.0;
        }
        if !p.value.all_finite() {
            return Err(Error::NonFinite(format!("parameter {} after adam step", p.name)));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Matrix;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Param::zeros("w", 1, 1)];
        p[0].grad.set(0, 0, 1.0);
        adam_step(&mut p, &AdamConfig::default(), 1).unwrap();
        // m_hat = 1, v_hat = 1 => step = lr / (1 + eps)
        let expect = -0.001 / (1.0 + 1e-8);
        assert!((p[0].value.get(0, 0) - expect).abs() < 1e-15);
        assert_eq!(p[0].grad.get(0, 0), 0.0);
    }

    #[test]
    fn zero_gradient_leaves_weights() {
        let mut p = vec![Param::new("w", Matrix::from_vec(1, 2, vec![0.3, -0.7]))];
        adam_step(&mut p, &AdamConfig::default(), 1).unwrap();
        assert_eq!(p[0].value.as_slice(), &[0.3, -0.7]);
    }

    #[test]
    fn equal_grads_equal_updates() {
        let mut p = vec![Param::zeros("a", 1, 1), Param::zeros("b", 1, 1)];
        for t in 1..=5 {
            p[0].grad.set(0, 0, 0.25 * t as f64);
            p[1].grad.set(0, 0, 0.25 * t as f64);
            adam_step(&mut p, &AdamConfig::default(), t).unwrap();
        }
        assert_eq!(p[0].value.get(0, 0), p[1].value.get(0, 0));
    }

    #[test]
    fn step_zero_rejected() {
        let mut p = vec![Param::zeros("w", 1, 1)];
        assert!(adam_step(&mut p, &AdamConfig::default(), 0).is_err());
    }
}
