//! Double-precision numeric kernel shared by both classifiers.
//!
//! There is no autodiff graph here: each model writes its own backward pass and
//! uses [`grad_check`] to verify it against central differences.

mod adam;
mod gradcheck;
mod init;
mod matrix;
mod ops;

pub use adam::{adam_step, AdamConfig};
pub use gradcheck::{grad_check, GradCheckReport};
pub use init::{glorot_uniform, orthogonal};
pub use matrix::{gemm, gemm_slice, matmul, Matrix};
pub use ops::{
    cross_entropy, dropout_apply, l1l2_penalty, sigmoid, sigmoid_grad, silu, silu_grad, soft_cross_entropy,
    stable_softmax, tanh_grad, Activation, DropoutMask, LOSS_FLOOR,
};

use serde::{Deserialize, Serialize};

/// Whether stochastic layers (dropout) are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor with its gradient and Adam moments.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    pub m: Matrix,
    pub v: Matrix,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let (r, c) = (value.rows(), value.cols());
        Param { name: name.into(), value, grad: Matrix::zeros(r, c), m: Matrix::zeros(r, c), v: Matrix::zeros(r, c) }
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Param::new(name, Matrix::zeros(rows, cols))
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// L1/L2 weight penalty attached to a named subset of parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegConfig {
    pub l1: f64,
    pub l2: f64,
    pub applies_to: Vec<String>,
}

impl RegConfig {
    pub const DEFAULT_L1: f64 = 1e-5;
    pub const DEFAULT_L2: f64 = 1e-4;

    pub fn new(applies_to: Vec<String>) -> Self {
        RegConfig { l1: Self::DEFAULT_L1, l2: Self::DEFAULT_L2, applies_to }
    }

    pub fn disabled() -> Self {
        RegConfig { l1: 0.0, l2: 0.0, applies_to: Vec::new() }
    }

    pub fn covers(&self, name: &str) -> bool {
        self.applies_to.iter().any(|n| n == name)
    }

    /// Adds the penalty gradient to every covered parameter; returns the total penalty.
    pub fn apply(&self, params: &mut [Param]) -> f64 {
        let mut total = 0.0;
        for p in params.iter_mut().filter(|p| self.covers(&p.name)) {
            let (penalty, inc) = l1l2_penalty(p, self);
            total += penalty;
            p.grad.add_assign(&inc);
        }
        total
    }

    /// Penalty only, without touching gradients.
    pub fn penalty(&self, params: &[Param]) -> f64 {
        params.iter().filter(|p| self.covers(&p.name)).map(|p| l1l2_penalty(p, self).0).sum()
    }
}
