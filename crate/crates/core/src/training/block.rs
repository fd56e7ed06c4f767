//! Training graph of the gated block.
//!
//! Forward: `z = (1 - m) * xp + m * xf`, `y = f(z)` with `xp = BN1(p)`,
//! `xf = BN2(p + r)` (computed densely), `xg = BN(p)` without affine, and
//! `m` either the hard decision `d = theta(xg - delta)` or the smooth
//! surrogate `s = sigmoid(eps * (xg - delta))`. Backward treats `d` as a
//! constant for the two BN paths and routes the selection gradient through
//! the surrogate to `xg` and `delta`.

use serde::{Deserialize, Serialize};

use crate::error::{CgError, Result};
use crate::gating::grouping::{base_weights, inverse_permutation, permute_channels, scatter_base_weights};
use crate::gating::{CgBlock, Thresholds};
use crate::nn::{batchnorm_backward, batchnorm_forward, conv2d, conv2d_backward, sigmoid, BnContext};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Selection used in the forward combine.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    /// Hard decisions `d` (the training graph proper).
    #[default]
    Hard,
    /// Smooth surrogate `s`; the forward is then differentiable and the
    /// backward is its exact gradient.
    Smooth,
}

/// Cached forward values of one training step.
#[derive(Clone, Debug)]
pub struct CgTrainContext<S> {
    pub x: Tensor<S>,
    /// `BN1(p)` with affine.
    pub xp: Tensor<S>,
    /// `BN2(p + r)` with affine.
    pub xf: Tensor<S>,
    /// Affine-free normalized partial sum.
    pub xg: Tensor<S>,
    /// Hard decisions.
    pub d: Tensor<S>,
    /// Smooth surrogate.
    pub s: Tensor<S>,
    /// Pre-activation.
    pub z: Tensor<S>,
    pub mode: CombineMode,
    bn1: BnContext<S>,
    bn2: BnContext<S>,
    gate: BnContext<S>,
}

/// Smooth gate value for channel `c`.
pub fn surrogate<S: Scalar>(th: &Thresholds<S>, c: usize, x: S, eps: S) -> S {
    match th {
        Thresholds::SingleSided { delta } => sigmoid(eps * (x - delta.value.data()[c])),
        Thresholds::TwoSided { high, low } => {
            sigmoid(eps * (high.value.data()[c] - x)) * sigmoid(eps * (x - low.value.data()[c]))
        }
    }
}

/// Partial derivatives of the surrogate: `(ds/dx, [ds/dtheta_0, ds/dtheta_1])`,
/// with thetas `[delta, _]` (single-sided) or `[high, low]` (two-sided).
pub fn surrogate_derivatives<S: Scalar>(th: &Thresholds<S>, c: usize, x: S, eps: S) -> (S, [S; 2]) {
    let one = S::one();
    match th {
        Thresholds::SingleSided { delta } => {
            let s = sigmoid(eps * (x - delta.value.data()[c]));
            let g = eps * s * (one - s);
            (g, [-g, S::zero()])
        }
        Thresholds::TwoSided { high, low } => {
            let sh = sigmoid(eps * (high.value.data()[c] - x));
            let sl = sigmoid(eps * (x - low.value.data()[c]));
            let dl = eps * sh * sl * (one - sl);
            let dh = eps * sl * sh * (one - sh);
            (dl - dh, [dh, -dl])
        }
    }
}

impl<S: Scalar> CgBlock<S> {
    /// Training-mode forward on an `(n, c_in, h, w)` batch. Updates all running
    /// statistics and drops any merged gate thresholds.
    pub fn forward_train(&mut self, x: &Tensor<S>, mode: CombineMode) -> Result<Tensor<S>> {
        let cfg = &self.cfg;
        let wb = base_weights(&self.weight.value, cfg.groups);
        let p = conv2d(x, &wb, &cfg.base_conv())?;
        let full = conv2d(x, &self.weight.value, &cfg.conv)?;
        let affine = Some((self.gamma.value.data(), self.beta.value.data()));
        let (xp, bn1) = batchnorm_forward(&p, &mut self.bn1, affine, true)?;
        let (xf, bn2) = batchnorm_forward(&full, &mut self.bn2, affine, true)?;
        let (xg, gate) = batchnorm_forward(&p, &mut self.gate.gate_bn, None, true)?;
        self.gate.invalidate();

        let [_, c, h, w] = xg.as_batch_dims()?;
        let hw = h * w;
        let eps = S::of(cfg.epsilon);
        let th = &self.gate.thresholds;
        let mut d = xg.clone();
        let mut s = xg.clone();
        let mut z = xg.clone();
        for (i, ((dv, sv), zv)) in d
            .data_mut()
            .iter_mut()
            .zip(s.data_mut())
            .zip(z.data_mut())
            .enumerate()
        {
            let ch = (i / hw) % c;
            let g = xg.data()[i];
            *dv = if th.decide(ch, g) { S::one() } else { S::zero() };
            *sv = surrogate(th, ch, g, eps);
            let m = match mode {
                CombineMode::Hard => *dv,
                CombineMode::Smooth => *sv,
            };
            *zv = (S::one() - m) * xp.data()[i] + m * xf.data()[i];
        }
        let mut y = z.map(|v| cfg.activation.apply(v));
        if let Some(perm) = self.output_permutation() {
            y = permute_channels(&y, &perm)?;
        }
        self.ctx = Some(CgTrainContext {
            x: x.clone(),
            xp,
            xf,
            xg,
            d,
            s,
            z,
            mode,
            bn1: bn1.expect("training context"),
            bn2: bn2.expect("training context"),
            gate: gate.expect("training context"),
        });
        Ok(y)
    }

    pub fn train_context(&self) -> Option<&CgTrainContext<S>> {
        self.ctx.as_ref()
    }

    /// Backward of [`CgBlock::forward_train`]. Accumulates parameter gradients
    /// and returns `dL/dx`. `extra_ds` adds a loss gradient taken directly with
    /// respect to the surrogate map (the FLOP loss).
    pub fn backward(&mut self, dy: &Tensor<S>, extra_ds: Option<&Tensor<S>>) -> Result<Tensor<S>> {
        let ctx = self
            .ctx
            .take()
            .ok_or_else(|| CgError::MissingContext("gated block".into()))?;
        let cfg = &self.cfg;
        let dy = match self.output_permutation() {
            Some(perm) => permute_channels(dy, &inverse_permutation(&perm))?,
            None => dy.clone(),
        };
        dy.expect_shape(ctx.z.shape())?;
        if let Some(e) = extra_ds {
            e.expect_shape(ctx.s.shape())?;
        }
        let [_, c, h, w] = ctx.z.as_batch_dims()?;
        let hw = h * w;
        let eps = S::of(cfg.epsilon);
        let one = S::one();

        let mut dxp = ctx.z.clone();
        let mut dxf = ctx.z.clone();
        let mut dxg = ctx.z.clone();
        let mut dtheta = [vec![S::zero(); c], vec![S::zero(); c]];
        for i in 0..ctx.z.len() {
            let ch = (i / hw) % c;
            let dz = dy.data()[i] * cfg.activation.derivative(ctx.z.data()[i]);
            let m = match ctx.mode {
                CombineMode::Hard => ctx.d.data()[i],
                CombineMode::Smooth => ctx.s.data()[i],
            };
            dxp.data_mut()[i] = dz * (one - m);
            dxf.data_mut()[i] = dz * m;
            let mut ds = dz * (ctx.xf.data()[i] - ctx.xp.data()[i]);
            if let Some(e) = extra_ds {
                ds += e.data()[i];
            }
            let (dsdx, dsdt) = surrogate_derivatives(&self.gate.thresholds, ch, ctx.xg.data()[i], eps);
            dxg.data_mut()[i] = ds * dsdx;
            dtheta[0][ch] += ds * dsdt[0];
            dtheta[1][ch] += ds * dsdt[1];
        }
        for (k, p) in self.gate.thresholds.params_mut().into_iter().enumerate() {
            p.accumulate(&dtheta[k]);
        }

        let gamma = self.gamma.value.data().to_vec();
        let (dp1, dg1, db1) = batchnorm_backward(&dxp, &ctx.bn1, Some(&gamma))?;
        let (dfull, dg2, db2) = batchnorm_backward(&dxf, &ctx.bn2, Some(&gamma))?;
        let (dp2, _, _) = batchnorm_backward(&dxg, &ctx.gate, None)?;
        self.gamma.accumulate(&dg1);
        self.gamma.accumulate(&dg2);
        self.beta.accumulate(&db1);
        self.beta.accumulate(&db2);

        let mut dp = dp1;
        dp.add_assign(&dp2)?;
        let wb = base_weights(&self.weight.value, cfg.groups);
        let (mut dx, dwb) = conv2d_backward(&ctx.x, &wb, &dp, &cfg.base_conv())?;
        let (dx_full, dw_full) = conv2d_backward(&ctx.x, &self.weight.value, &dfull, &cfg.conv)?;
        dx.add_assign(&dx_full)?;
        let mut dw = dw_full;
        scatter_base_weights(&mut dw, &dwb, cfg.groups);
        self.weight.accumulate(dw.data());
        Ok(dx)
    }

    /// Restores `low <= high` after an optimizer step on two-sided thresholds.
    pub fn clamp_thresholds(&mut self) {
        self.gate.thresholds.clamp_ordered();
        self.gate.invalidate();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gating::CgLayerConfig;
    use crate::nn::{Activation, ConvSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(act: Activation, seed: u64) -> (CgBlock<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = CgLayerConfig::new(ConvSpec::new(4, 4, 3).with_padding(1), 2, act);
        let b = CgBlock::new(cfg, &mut rng).unwrap();
        let x = Tensor::randn(&[2, 4, 4, 4], 1.0, &mut rng);
        (b, x)
    }

    #[test]
    fn extreme_deltas_select_one_path() {
        let (mut b, x) = block(Activation::Relu, 1);
        b.gate.force(true);
        let y = b.forward_train(&x, CombineMode::Hard).unwrap();
        let ctx = b.train_context().unwrap();
        assert_eq!(y, ctx.xf.map(|v| v.max(0.0)));
        b.gate.force(false);
        let y = b.forward_train(&x, CombineMode::Hard).unwrap();
        let ctx = b.train_context().unwrap();
        assert_eq!(y, ctx.xp.map(|v| v.max(0.0)));
    }

    #[test]
    fn decisions_recomputable_from_context() {
        let (mut b, x) = block(Activation::Relu, 2);
        b.gate.set_delta(0.3);
        b.forward_train(&x, CombineMode::Hard).unwrap();
        let ctx = b.train_context().unwrap();
        for (d, g) in ctx.d.data().iter().zip(ctx.xg.data()) {
            assert_eq!(*d, if g - 0.3 >= 0.0 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn backward_without_forward_fails() {
        let (mut b, _) = block(Activation::Relu, 3);
        let dy = Tensor::zeros(&[2, 4, 4, 4]);
        assert!(matches!(b.backward(&dy, None), Err(CgError::MissingContext(_))));
    }

    #[test]
    fn identical_paths_give_zero_delta_gradient() {
        let (mut b, x) = block(Activation::Relu, 4);
        b.forward_train(&x, CombineMode::Hard).unwrap();
        let ctx = b.ctx.as_mut().unwrap();
        ctx.xf = ctx.xp.clone();
        let dy = Tensor::ones(&[2, 4, 4, 4]);
        b.backward(&dy, None).unwrap();
        let Thresholds::SingleSided { delta } = &b.gate.thresholds else {
            unreachable!()
        };
        assert!(delta.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn saturated_surrogate_has_tiny_delta_gradient() {
        let (mut b, x) = block(Activation::Relu, 5);
        b.cfg.epsilon = 1e3;
        b.gate.set_delta(100.0);
        b.forward_train(&x, CombineMode::Hard).unwrap();
        b.backward(&Tensor::ones(&[2, 4, 4, 4]), None).unwrap();
        let Thresholds::SingleSided { delta } = &b.gate.thresholds else {
            unreachable!()
        };
        assert!(delta.grad.max_abs() < 1e-6);
    }

    #[test]
    fn two_sided_derivatives_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = crate::gating::GateState::<f64>::new(1, crate::gating::GateKind::TwoSided);
        for _ in 0..20 {
            let x: f64 = rand::Rng::random_range(&mut rng, -2.0..2.0);
            let eps = 3.0;
            let (dx, dt) = surrogate_derivatives(&g.thresholds, 0, x, eps);
            let h = 1e-6;
            let num = (surrogate(&g.thresholds, 0, x + h, eps) - surrogate(&g.thresholds, 0, x - h, eps)) / (2.0 * h);
            assert!((num - dx).abs() < 1e-7);
            for (k, analytic) in dt.iter().enumerate() {
                let shift = |th: &mut Thresholds<f64>, v: f64| {
                    th.params_mut()[k].value.data_mut()[0] += v;
                };
                shift(&mut g.thresholds, h);
                let up = surrogate(&g.thresholds, 0, x, eps);
                shift(&mut g.thresholds, -2.0 * h);
                let down = surrogate(&g.thresholds, 0, x, eps);
                shift(&mut g.thresholds, h);
                assert!(((up - down) / (2.0 * h) - analytic).abs() < 1e-7);
            }
        }
    }
}
