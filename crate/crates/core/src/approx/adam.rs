use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adam with bias-corrected moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// One descent step. Rejects non-finite gradients without touching
    /// either the parameters or the moments.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::dim("optimizer parameters", self.m.len(), params.len()));
        }
        if grad.len() != self.m.len() {
            return Err(Error::dim("optimizer gradient", self.m.len(), grad.len()));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient component {i} ({})", grad[i]),
                step: self.t as usize,
            });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut opt = Adam::new(3, 0.1);
        let mut p = vec![1.0, -2.0, 3.0];
        opt.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn hand_computed_step_with_prior_moments() {
        let mut opt = Adam::new(1, 0.01);
        opt.m = vec![0.2];
        opt.v = vec![0.05];
        opt.t = 2;
        let mut p = vec![1.0];
        opt.step(&mut p, &[0.5]).unwrap();
        // m = 0.9*0.2 + 0.1*0.5 = 0.23; v = 0.999*0.05 + 0.001*0.25 = 0.0502
        let m_hat = 0.23 / (1.0 - 0.9f64.powi(3));
        let v_hat = 0.0502 / (1.0 - 0.999f64.powi(3));
        let expect = 1.0 - 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((opt.m[0] - 0.23).abs() < 1e-15);
        assert!((opt.v[0] - 0.0502).abs() < 1e-15);
        assert!((p[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn convex_quadratic_descends() {
        // f(x) = sum_i c_i x_i^2
        let c = [1.0, 4.0, 0.5];
        let f = |x: &[f64]| x.iter().zip(&c).map(|(x, c)| c * x * x).sum::<f64>();
        let mut x = vec![2.0, -1.5, 3.0];
        let mut opt = Adam::new(3, 0.05);
        let mut prev = f(&x);
        for step in 0..200 {
            let g: Vec<f64> = x.iter().zip(&c).map(|(x, c)| 2.0 * c * x).collect();
            opt.step(&mut x, &g).unwrap();
            let cur = f(&x);
            if step >= 5 && prev > 1e-3 {
                assert!(cur <= prev, "step {step}: {cur} > {prev}");
            }
            prev = cur;
        }
        assert!(prev < 0.05);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut opt = Adam::new(2, 0.1);
        let mut p = vec![0.0, 0.0];
        let err = opt.step(&mut p, &[0.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        assert_eq!(opt.t, 0);
    }
}
