//! Sparsity and distillation losses.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{config_err, Result};
use crate::gating::{GateKind, Thresholds};
use crate::nn::{log_softmax, softmax};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `lambda * sum_c (t - delta_c)^2` and its gradient `-2 lambda (t - delta_c)`.
pub fn target_loss<S: Scalar>(delta: &[S], target: S, lambda: S) -> (S, Vec<S>) {
    let two = S::of(2.0);
    let loss = delta.iter().map(|&d| (target - d) * (target - d)).sum::<S>() * lambda;
    let grad = delta.iter().map(|&d| -two * lambda * (target - d)).collect();
    (loss, grad)
}

/// Window half-width of a two-sided gate that prunes the same fraction of a
/// standard-normal input as a single-sided gate at `t`:
/// `2 (1 - Phi(w)) = Phi(t)`.
pub fn two_sided_half_width(t: f64) -> f64 {
    let n = Normal::standard();
    n.inverse_cdf(1.0 - n.cdf(t) / 2.0)
}

/// Applies the target loss to one gate's thresholds, accumulating the
/// gradient. Two-sided windows are pulled toward `[-w, w]`.
pub fn apply_target_loss<S: Scalar>(th: &mut Thresholds<S>, target: f64, lambda: f64) -> f64 {
    match th.kind() {
        GateKind::SingleSided => {
            let Thresholds::SingleSided { delta } = th else { unreachable!() };
            let (l, g) = target_loss(delta.value.data(), S::of(target), S::of(lambda));
            delta.accumulate(&g);
            l.as_f64()
        }
        GateKind::TwoSided => {
            let Thresholds::TwoSided { high, low } = th else { unreachable!() };
            let w = two_sided_half_width(target);
            let (lh, gh) = target_loss(high.value.data(), S::of(w), S::of(lambda));
            let (ll, gl) = target_loss(low.value.data(), S::of(-w), S::of(lambda));
            high.accumulate(&gh);
            low.accumulate(&gl);
            lh.as_f64() + ll.as_f64()
        }
    }
}

/// One gated layer's contribution to the computation-cost loss.
pub struct FlopTerm<'a, S> {
    /// Surrogate map `(n, c_out, h', w')`.
    pub s: &'a Tensor<S>,
    /// `eta * c_in * k^2 * h' * w' * c_out`.
    pub scale: f64,
}

/// `lambda * (sum_l mean_n(sum(1 - s_l)) * scale_l)^2` with the gradient
/// with respect to every surrogate map.
pub fn flop_loss<S: Scalar>(terms: &[FlopTerm<'_, S>], lambda: f64) -> Result<(f64, Vec<Tensor<S>>)> {
    let mut total = 0.0;
    for t in terms {
        let nb = t.s.as_batch_dims()?[0] as f64;
        let inner: f64 = t.s.data().iter().map(|v| 1.0 - v.as_f64()).sum::<f64>() / nb;
        total += inner * t.scale;
    }
    let loss = lambda * total * total;
    let grads = terms
        .iter()
        .map(|t| {
            let nb = t.s.as_batch_dims().map(|d| d[0]).unwrap_or(1) as f64;
            let g = S::of(-2.0 * lambda * total * t.scale / nb);
            Tensor::full(t.s.shape(), g)
        })
        .collect();
    Ok((loss, grads))
}

/// Distillation loss `-((1-l) sum y log P_S + l sum P_T log P_S)` with
/// temperature-`kappa` softmax on both networks, averaged over the batch,
/// and its gradient with respect to the student logits.
pub fn kd_loss<S: Scalar>(
    student: &Tensor<S>,
    teacher: &Tensor<S>,
    labels: &[usize],
    kappa: f64,
    lambda_kd: f64,
) -> Result<(S, Tensor<S>)> {
    teacher.expect_shape(student.shape())?;
    if !(kappa > 0.0) || !(0.0..=1.0).contains(&lambda_kd) {
        return Err(config_err(format!("invalid distillation parameters kappa={kappa}, lambda={lambda_kd}")));
    }
    let (nb, classes) = (student.dim(0), student.dim(1));
    if labels.len() != nb || labels.iter().any(|&l| l >= classes) {
        return Err(config_err("labels do not match student logits"));
    }
    let k = S::of(kappa);
    let lam = S::of(lambda_kd);
    let one = S::one();
    let logp = log_softmax(student, k);
    let ps = softmax(student, k);
    let pt = softmax(teacher, k);
    let inv = one / S::of_usize(nb);
    let mut loss = S::zero();
    let mut grad = ps.clone();
    for n in 0..nb {
        for c in 0..classes {
            let i = n * classes + c;
            let y = if labels[n] == c { one } else { S::zero() };
            let q = (one - lam) * y + lam * pt.data()[i];
            loss -= q * logp.data()[i];
            grad.data_mut()[i] = (ps.data()[i] - q) / k * inv;
        }
    }
    Ok((loss * inv, grad))
}
