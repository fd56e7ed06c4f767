//! Batch normalization over `(n, c, h, w)` features, per channel.

use serde::{Deserialize, Serialize};

use crate::error::{CgError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Running statistics of one normalizer. `running = momentum * running + (1 - momentum) * batch`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
    pub momentum: S,
    pub eps: S,
}

impl<S: Scalar> RunningStats<S> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![S::zero(); channels],
            var: vec![S::one(); channels],
            momentum: S::of(BN_MOMENTUM),
            eps: S::of(BN_EPS),
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// `sqrt(var + eps)` for channel `c`.
    #[inline]
    pub fn std(&self, c: usize) -> S {
        (self.var[c] + self.eps).sqrt()
    }
}

/// Normalizer with learnable scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<S> {
    pub gamma: Vec<S>,
    pub beta: Vec<S>,
    pub stats: RunningStats<S>,
}

impl<S: Scalar> BatchNormState<S> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![S::one(); channels],
            beta: vec![S::zero(); channels],
            stats: RunningStats::new(channels),
        }
    }
}

/// The standardization used everywhere in the crate: `(x - mean) / std`.
#[inline]
pub fn normalize<S: Scalar>(x: S, mean: S, std: S) -> S {
    (x - mean) / std
}

/// Cached values for the training-mode backward pass.
#[derive(Clone, Debug)]
pub struct BnContext<S> {
    /// Standardized input before the affine map.
    pub normalized: Tensor<S>,
    pub std: Vec<S>,
}

fn layout(x: &Tensor<impl Scalar>, channels: usize) -> Result<[usize; 4]> {
    let dims = x.as_batch_dims()?;
    if dims[1] != channels {
        return Err(CgError::Shape {
            expected: vec![dims[0], channels, dims[2], dims[3]],
            actual: x.shape().to_vec(),
        });
    }
    if dims[0] * dims[2] * dims[3] == 0 {
        return Err(CgError::Degenerate(
            "batch norm needs at least one element per channel".into(),
        ));
    }
    Ok(dims)
}

/// Batch-norm forward. Training mode normalizes with batch statistics
/// (biased variance) and folds them into the running stats; inference mode
/// uses the running stats. `affine = None` skips scale and shift.
pub fn batchnorm_forward<S: Scalar>(
    x: &Tensor<S>,
    stats: &mut RunningStats<S>,
    affine: Option<(&[S], &[S])>,
    training: bool,
) -> Result<(Tensor<S>, Option<BnContext<S>>)> {
    let [nb, c, h, w] = layout(x, stats.channels())?;
    let hw = h * w;
    let count = S::of_usize(nb * hw);
    let xd = x.data();
    let (mean, std): (Vec<S>, Vec<S>) = if training {
        let mut mean = vec![S::zero(); c];
        let mut var = vec![S::zero(); c];
        for ch in 0..c {
            let mut s = S::zero();
            for b in 0..nb {
                for &v in &xd[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                    s += v;
                }
            }
            let m = s / count;
            let mut q = S::zero();
            for b in 0..nb {
                for &v in &xd[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                    q += (v - m) * (v - m);
                }
            }
            mean[ch] = m;
            var[ch] = q / count;
        }
        let mo = stats.momentum;
        for ch in 0..c {
            stats.mean[ch] = mo * stats.mean[ch] + (S::one() - mo) * mean[ch];
            stats.var[ch] = mo * stats.var[ch] + (S::one() - mo) * var[ch];
        }
        let std = var.iter().map(|&v| (v + stats.eps).sqrt()).collect();
        (mean, std)
    } else {
        (stats.mean.clone(), (0..c).map(|ch| stats.std(ch)).collect())
    };

    let mut normalized = vec![S::zero(); x.len()];
    for b in 0..nb {
        for ch in 0..c {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            for (o, &v) in normalized[r.clone()].iter_mut().zip(&xd[r]) {
                *o = normalize(v, mean[ch], std[ch]);
            }
        }
    }
    let normalized = Tensor::from_vec(x.shape(), normalized)?;
    let out = match affine {
        Some((gamma, beta)) => apply_affine(&normalized, gamma, beta)?,
        None => normalized.clone(),
    };
    let ctx = training.then_some(BnContext { normalized, std });
    Ok((out, ctx))
}

/// Per-channel `x * gamma + beta`.
pub fn apply_affine<S: Scalar>(x: &Tensor<S>, gamma: &[S], beta: &[S]) -> Result<Tensor<S>> {
    let [nb, c, h, w] = layout(x, gamma.len())?;
    let hw = h * w;
    let mut out = x.clone();
    let od = out.data_mut();
    for b in 0..nb {
        for ch in 0..c {
            for v in &mut od[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                *v = *v * gamma[ch] + beta[ch];
            }
        }
    }
    Ok(out)
}

/// Training-mode backward. Returns `(dx, dgamma, dbeta)`; the parameter
/// gradients are zero vectors when `gamma` is `None`.
pub fn batchnorm_backward<S: Scalar>(
    dy: &Tensor<S>,
    ctx: &BnContext<S>,
    gamma: Option<&[S]>,
) -> Result<(Tensor<S>, Vec<S>, Vec<S>)> {
    dy.expect_shape(ctx.normalized.shape())?;
    let [nb, c, h, w] = layout(dy, ctx.std.len())?;
    let hw = h * w;
    let m = S::of_usize(nb * hw);
    let xh = ctx.normalized.data();
    let g = dy.data();
    let mut dgamma = vec![S::zero(); c];
    let mut dbeta = vec![S::zero(); c];
    let mut dx = vec![S::zero(); dy.len()];
    for ch in 0..c {
        let scale = gamma.map_or(S::one(), |gm| gm[ch]);
        let (mut sum_d, mut sum_dx) = (S::zero(), S::zero());
        for b in 0..nb {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            for (&gy, &xn) in g[r.clone()].iter().zip(&xh[r]) {
                sum_d += gy;
                sum_dx += gy * xn;
            }
        }
        if gamma.is_some() {
            dgamma[ch] = sum_dx;
            dbeta[ch] = sum_d;
        }
        // with dxhat = dy * scale
        let k = scale / (m * ctx.std[ch]);
        for b in 0..nb {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            for ((d, &gy), &xn) in dx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xh[r]) {
                *d = k * (m * gy - sum_d - xn * sum_dx);
            }
        }
    }
    Ok((Tensor::from_vec(dy.shape(), dx)?, dgamma, dbeta))
}
