use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{counter, Mat};

/// Elementwise operations per parameter in [`adam_update`]: moment updates
/// (3 + 4), two bias corrections, square root, epsilon add, divide and the
/// learning-rate multiply.
pub const ADAM_OPS_PER_ELEMENT: usize = 13;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m1: Mat,
    pub m2: Mat,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

pub fn adam_init(rows: usize, cols: usize) -> AdamState {
    adam_init_with(rows, cols, AdamConfig::default())
}

pub fn adam_init_with(rows: usize, cols: usize, cfg: AdamConfig) -> AdamState {
    AdamState {
        m1: Mat::zeros(rows, cols),
        m2: Mat::zeros(rows, cols),
        t: 0,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
    }
}

impl AdamState {
    pub fn shape(&self) -> (usize, usize) {
        self.m1.shape()
    }

    /// Zero both moments and the step counter.
    pub fn reset(&mut self) {
        self.m1.fill(0.0);
        self.m2.fill(0.0);
        self.t = 0;
    }
}

/// One Adam step. Updates the state in place and returns
/// `U = -lr * M* / (sqrt(V*) + eps)`.
pub fn adam_update(state: &mut AdamState, grad: &Mat, lr: f64) -> Result<Mat> {
    if grad.shape() != state.shape() {
        return Err(Error::shape(
            "adam_update",
            format!("gradient {:?} vs state {:?}", grad.shape(), state.shape()),
        ));
    }
    state.t += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let mut u = Mat::zeros(grad.rows(), grad.cols());
    let m1 = state.m1.data_mut();
    let m2 = state.m2.data_mut();
    for (((u, &g), m), v) in u.data_mut().iter_mut().zip(grad.data()).zip(m1).zip(m2) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * (g * g);
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *u = -lr * m_hat / (v_hat.sqrt() + eps);
    }
    counter::add_optimizer(ADAM_OPS_PER_ELEMENT * grad.len());
    Ok(u)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_zero() {
        let s = adam_init(2, 3);
        assert_eq!(s.m1, Mat::zeros(2, 3));
        assert_eq!(s.m2, Mat::zeros(2, 3));
        assert_eq!(s.t, 0);
        let mut used = s.clone();
        adam_update(&mut used, &Mat::from_fn(2, 3, |i, j| (i + j) as f64), 0.1).unwrap();
        used.reset();
        assert_eq!(used, s);
    }

    #[test]
    fn zero_grad_gives_zero_update() {
        let mut s = adam_init(2, 2);
        let u = adam_update(&mut s, &Mat::zeros(2, 2), 0.5).unwrap();
        assert!(u.is_zero());
    }

    #[test]
    fn scalar_first_step() {
        let mut s = adam_init(1, 1);
        let u = adam_update(&mut s, &Mat::from_rows(&[[1.0]]).unwrap(), 0.1).unwrap();
        assert!((s.m1.get(0, 0) - 0.1).abs() < 1e-15);
        assert!((s.m2.get(0, 0) - 0.001).abs() < 1e-15);
        assert!((u.get(0, 0) + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn counts_ops_and_rejects_shape() {
        let mut s = adam_init(2, 3);
        let (_, ops) = counter::measure(|| adam_update(&mut s, &Mat::zeros(2, 3), 0.1).unwrap());
        assert_eq!(ops.optimizer_ops as usize, 6 * ADAM_OPS_PER_ELEMENT);
        assert!(adam_update(&mut s, &Mat::zeros(3, 2), 0.1).is_err());
    }
}
