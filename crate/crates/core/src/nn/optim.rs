//! SGD with momentum and L2 weight decay.
//!
//! `v <- momentum * v + grad + weight_decay * param; param <- param - lr * v`

use crate::error::{CgError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn sgd_update<S: Scalar>(param: &mut [S], grad: &[S], velocity: &mut [S], lr: S, momentum: S, weight_decay: S) {
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
}

pub fn sgd_step<S: Scalar>(
    params: &mut [Tensor<S>],
    grads: &[Tensor<S>],
    velocities: &mut [Tensor<S>],
    lr: S,
    momentum: S,
    weight_decay: S,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocities.len() {
        return Err(CgError::Shape {
            expected: vec![params.len()],
            actual: vec![grads.len(), velocities.len()],
        });
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocities.iter_mut()) {
        g.expect_shape(p.shape())?;
        v.expect_shape(p.shape())?;
        sgd_update(p.data_mut(), g.data(), v.data_mut(), lr, momentum, weight_decay);
    }
    Ok(())
}

/// A trainable tensor with its gradient accumulator and momentum buffer.
#[derive(Clone, Debug)]
pub struct Param<S> {
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    pub velocity: Tensor<S>,
    /// Whether weight decay applies.
    pub decay: bool,
    /// Frozen parameters keep their value through `step`.
    pub frozen: bool,
}

impl<S: Scalar> Param<S> {
    pub fn new(value: Tensor<S>, decay: bool) -> Self {
        let shape = value.shape().to_vec();
        Self {
            value,
            grad: Tensor::zeros(&shape),
            velocity: Tensor::zeros(&shape),
            decay,
            frozen: false,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(S::zero());
    }

    pub fn accumulate(&mut self, g: &[S]) {
        for (a, &b) in self.grad.data_mut().iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn step(&mut self, lr: S, momentum: S, weight_decay: S) {
        if self.frozen {
            return;
        }
        let wd = if self.decay { weight_decay } else { S::zero() };
        sgd_update(
            self.value.data_mut(),
            self.grad.data(),
            self.velocity.data_mut(),
            lr,
            momentum,
            wd,
        );
    }
}
