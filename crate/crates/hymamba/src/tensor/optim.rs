//! AdamW with decoupled weight decay.

use super::Tensor;
use crate::error::{Error, Result};
use std::collections::HashMap;

/// Optimizer state: per-parameter moment accumulators keyed by name plus the
/// shared hyperparameters.
pub struct OptimState {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    step: u64,
    first: HashMap<String, Vec<f64>>,
    second: HashMap<String, Vec<f64>>,
}

impl OptimState {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        OptimState {
            learning_rate,
            weight_decay,
            betas: (0.9, 0.999),
            eps: 1e-8,
            step: 0,
            first: HashMap::new(),
            second: HashMap::new(),
        }
    }

    pub fn with_betas(mut self, betas: (f64, f64), eps: f64) -> Self {
        self.betas = betas;
        self.eps = eps;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One AdamW update over named (parameter, gradient) pairs. The decay is
/// decoupled: `p <- p - lr*wd*p` before the moment-based update. Aborts
/// without touching any parameter if a gradient is non-finite.
pub fn adamw_step(
    params: &mut [(String, &mut Tensor)],
    grads: &[Tensor],
    opt: &mut OptimState,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Contract(format!(
            "adamw_step: {} params but {} grads",
            params.len(),
            grads.len()
        )));
    }
    if opt.eps <= 0.0 {
        return Err(Error::Contract("adamw_step: eps must be > 0".into()));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Dim {
                op: "adamw_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!(
                "adamw_step: non-finite gradient for parameter '{name}'"
            )));
        }
    }

    opt.step += 1;
    let t = opt.step as i32;
    let (b1, b2) = opt.betas;
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let lr = opt.learning_rate;

    for ((name, p), g) in params.iter_mut().zip(grads) {
        let n = p.numel();
        let m = opt
            .first
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; n]);
        let v = opt
            .second
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; n]);
        let data = p.data_mut();
        let gd = g.data();
        for i in 0..n {
            data[i] -= lr * opt.weight_decay * data[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gd[i];
            v[i] = b2 * v[i] + (1.0 - b2) * gd[i] * gd[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + opt.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_scalar(p0: f64, g: f64, opt: &mut OptimState) -> f64 {
        let mut p = Tensor::scalar(p0);
        let grad = Tensor::scalar(g);
        adamw_step(&mut [("p".into(), &mut p)], &[grad], opt).unwrap();
        p.item()
    }

    #[test]
    fn zero_grad_zero_decay_is_fixed_point() {
        let mut opt = OptimState::new(0.5, 0.0);
        assert_eq!(step_scalar(1.25, 0.0, &mut opt), 1.25);
    }

    #[test]
    fn decoupled_decay_definition() {
        let mut opt = OptimState::new(1.0, 0.1);
        let p = step_scalar(1.0, 0.0, &mut opt);
        assert!((p - 0.9).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut opt = OptimState::new(0.1, 0.0);
        let p = step_scalar(1.0, 1.0, &mut opt);
        // m_hat = v_hat = 1 after bias correction, so delta ~ lr.
        assert!((p - 0.9).abs() < 1e-8, "got {p}");
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let mut opt = OptimState::new(0.1, 0.0);
        let mut p = Tensor::scalar(1.0);
        let g = Tensor::scalar(f64::NAN);
        let err = adamw_step(&mut [("p".into(), &mut p)], &[g], &mut opt).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(p.item(), 1.0);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn step_counter_increments() {
        let mut opt = OptimState::new(0.1, 0.0);
        step_scalar(1.0, 0.5, &mut opt);
        assert_eq!(opt.step_count(), 1);
        step_scalar(1.0, 0.5, &mut opt);
        assert_eq!(opt.step_count(), 2);
    }
}
