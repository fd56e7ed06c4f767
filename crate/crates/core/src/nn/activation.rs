use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// No nonlinearity; used before a residual addition.
    Identity,
    Relu,
    Tanh,
    Sigmoid,
    /// `+1` for `x >= 0`, else `-1`.
    BinarySign,
}

impl Activation {
    #[inline]
    pub fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(S::zero()),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::BinarySign => {
                if x >= S::zero() {
                    S::one()
                } else {
                    -S::one()
                }
            }
        }
    }

    /// Derivative at pre-activation `x`. `BinarySign` uses the clipped
    /// straight-through estimator `1{|x| <= 1}`.
    #[inline]
    pub fn derivative<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Identity => S::one(),
            Activation::Relu => {
                if x > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                S::one() - t * t
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (S::one() - s)
            }
            Activation::BinarySign => {
                if x.abs() <= S::one() {
                    S::one()
                } else {
                    S::zero()
                }
            }
        }
    }

    /// Activations whose ineffective outputs sit at both ends of the range.
    pub fn saturates_both_sides(self) -> bool {
        matches!(
            self,
            Activation::Tanh | Activation::Sigmoid | Activation::BinarySign
        )
    }
}

/// Logistic function, evaluated without overflow for large `|x|`.
#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub fn activation<S: Scalar>(x: &Tensor<S>, kind: Activation) -> Tensor<S> {
    x.map(|v| kind.apply(v))
}

/// `dL/dx` given the pre-activation `x` and `dL/dy`.
pub fn activation_backward<S: Scalar>(x: &Tensor<S>, dy: &Tensor<S>, kind: Activation) -> Tensor<S> {
    x.zip_map(dy, |v, g| g * kind.derivative(v))
        .expect("activation input and gradient share a shape")
}
