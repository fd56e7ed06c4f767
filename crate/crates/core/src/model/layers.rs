//! Ungated layers and the residual wrapper.

use rand::Rng;

use crate::error::{CgError, Result};
use crate::gating::{CgBlock, DecisionMap, LayerCounters};
use crate::nn::{
    activation_backward, batchnorm_backward, batchnorm_forward, conv2d, conv2d_backward, linear_backward,
    linear_forward, Activation, BnContext, ConvSpec, Param, RunningStats,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::CombineMode;

/// Convolution + batch norm + activation.
#[derive(Clone, Debug)]
pub struct ConvBlock<S> {
    pub conv: ConvSpec,
    pub activation: Activation,
    pub weight: Param<S>,
    pub gamma: Param<S>,
    pub beta: Param<S>,
    pub bn: RunningStats<S>,
    ctx: Option<(Tensor<S>, BnContext<S>, Tensor<S>)>,
}

impl<S: Scalar> ConvBlock<S> {
    pub fn new<R: Rng + ?Sized>(conv: ConvSpec, activation: Activation, rng: &mut R) -> Result<Self> {
        conv.validate()?;
        let fan_in = conv.patch_len() as f64;
        let co = conv.out_channels;
        Ok(Self {
            weight: Param::new(Tensor::randn(&conv.weight_shape(), (2.0 / fan_in).sqrt(), rng), true),
            gamma: Param::new(Tensor::ones(&[co]), false),
            beta: Param::new(Tensor::zeros(&[co]), false),
            bn: RunningStats::new(co),
            conv,
            activation,
            ctx: None,
        })
    }

    pub fn from_parts(
        conv: ConvSpec,
        activation: Activation,
        weight: Tensor<S>,
        gamma: Tensor<S>,
        beta: Tensor<S>,
        bn: RunningStats<S>,
    ) -> Self {
        Self {
            conv,
            activation,
            weight: Param::new(weight, true),
            gamma: Param::new(gamma, false),
            beta: Param::new(beta, false),
            bn,
            ctx: None,
        }
    }

    pub fn forward_train(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let pre = conv2d(x, &self.weight.value, &self.conv)?;
        let affine = Some((self.gamma.value.data(), self.beta.value.data()));
        let (z, ctx) = batchnorm_forward(&pre, &mut self.bn, affine, true)?;
        let y = z.map(|v| self.activation.apply(v));
        self.ctx = Some((x.clone(), ctx.expect("training context"), z));
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<S>) -> Result<Tensor<S>> {
        let (x, bn, z) = self
            .ctx
            .take()
            .ok_or_else(|| CgError::MissingContext("conv block".into()))?;
        let dz = activation_backward(&z, dy, self.activation);
        let (dpre, dg, db) = batchnorm_backward(&dz, &bn, Some(self.gamma.value.data()))?;
        self.gamma.accumulate(&dg);
        self.beta.accumulate(&db);
        let (dx, dw) = conv2d_backward(&x, &self.weight.value, &dpre, &self.conv)?;
        self.weight.accumulate(dw.data());
        Ok(dx)
    }

    /// Inference on one `(c,h,w)` sample with running statistics.
    pub fn infer(&self, x: &Tensor<S>) -> Result<(Tensor<S>, LayerCounters)> {
        let pre = conv2d(x, &self.weight.value, &self.conv)?;
        let mut stats = self.bn.clone();
        let affine = Some((self.gamma.value.data(), self.beta.value.data()));
        let (z, _) = batchnorm_forward(&pre, &mut stats, affine, false)?;
        let macs = (pre.len() * self.conv.patch_len()) as u64;
        let counters = LayerCounters {
            base_macs: macs,
            weights_accessed: self.weight.value.len() as u64,
            ..Default::default()
        };
        Ok((z.map(|v| self.activation.apply(v)), counters))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        vec![&mut self.weight, &mut self.gamma, &mut self.beta]
    }
}

/// Fully-connected layer with bias.
#[derive(Clone, Debug)]
pub struct LinearLayer<S> {
    pub weight: Param<S>,
    pub bias: Param<S>,
    ctx: Option<Tensor<S>>,
}

impl<S: Scalar> LinearLayer<S> {
    pub fn new<R: Rng + ?Sized>(fin: usize, fout: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::new(Tensor::randn(&[fout, fin], (1.0 / fin as f64).sqrt(), rng), true),
            bias: Param::new(Tensor::zeros(&[fout]), false),
            ctx: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<S>, training: bool) -> Result<Tensor<S>> {
        let y = linear_forward(x, &self.weight.value, self.bias.value.data())?;
        if training {
            self.ctx = Some(x.clone());
        }
        Ok(y)
    }

    pub fn infer(&self, x: &Tensor<S>) -> Result<(Tensor<S>, LayerCounters)> {
        let y = linear_forward(x, &self.weight.value, self.bias.value.data())?;
        let n = self.weight.value.len() as u64;
        Ok((
            y,
            LayerCounters {
                base_macs: n * x.dim(0) as u64,
                weights_accessed: n,
                ..Default::default()
            },
        ))
    }

    pub fn backward(&mut self, dy: &Tensor<S>) -> Result<Tensor<S>> {
        let x = self
            .ctx
            .take()
            .ok_or_else(|| CgError::MissingContext("linear layer".into()))?;
        let (dx, dw, db) = linear_backward(&x, &self.weight.value, dy)?;
        self.weight.accumulate(dw.data());
        self.bias.accumulate(&db);
        Ok(dx)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Convolution inside a residual block.
#[derive(Clone, Debug)]
pub enum ConvUnit<S> {
    Plain(ConvBlock<S>),
    Gated(CgBlock<S>),
}

/// Inference result of one unit: output, decisions (gated only) and counters.
pub type UnitOutput<S> = (Tensor<S>, Option<DecisionMap>, LayerCounters);

impl<S: Scalar> ConvUnit<S> {
    pub fn forward_train(&mut self, x: &Tensor<S>, mode: CombineMode) -> Result<Tensor<S>> {
        match self {
            ConvUnit::Plain(c) => c.forward_train(x),
            ConvUnit::Gated(g) => g.forward_train(x, mode),
        }
    }

    pub fn backward(&mut self, dy: &Tensor<S>, extra_ds: Option<&Tensor<S>>) -> Result<Tensor<S>> {
        match self {
            ConvUnit::Plain(c) => c.backward(dy),
            ConvUnit::Gated(g) => g.backward(dy, extra_ds),
        }
    }

    pub fn infer(&self, x: &Tensor<S>) -> Result<UnitOutput<S>> {
        match self {
            ConvUnit::Plain(c) => {
                let (y, counters) = c.infer(x)?;
                Ok((y, None, counters))
            }
            ConvUnit::Gated(g) => {
                let o = g.infer(x)?;
                Ok((o.y, Some(o.decisions), o.counters))
            }
        }
    }

    pub fn as_gated(&self) -> Option<&CgBlock<S>> {
        match self {
            ConvUnit::Gated(g) => Some(g),
            ConvUnit::Plain(_) => None,
        }
    }

    pub fn as_gated_mut(&mut self) -> Option<&mut CgBlock<S>> {
        match self {
            ConvUnit::Gated(g) => Some(g),
            ConvUnit::Plain(_) => None,
        }
    }
}

/// `relu(b(a(x)) + shortcut(x))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock<S> {
    pub a: ConvUnit<S>,
    pub b: ConvUnit<S>,
    /// 1x1 projection (identity activation) when the shortcut changes shape.
    pub proj: Option<ConvBlock<S>>,
    ctx: Option<Tensor<S>>,
}

/// Outputs of a residual block on one sample: `(y, a, b, proj)`.
pub type ResidualOutput<S> = (Tensor<S>, UnitOutput<S>, UnitOutput<S>, Option<(Tensor<S>, LayerCounters)>);

impl<S: Scalar> ResidualBlock<S> {
    pub fn new(a: ConvUnit<S>, b: ConvUnit<S>, proj: Option<ConvBlock<S>>) -> Self {
        Self { a, b, proj, ctx: None }
    }

    pub fn forward_train(&mut self, x: &Tensor<S>, mode: CombineMode) -> Result<Tensor<S>> {
        let ya = self.a.forward_train(x, mode)?;
        let mut sum = self.b.forward_train(&ya, mode)?;
        match &mut self.proj {
            Some(p) => sum.add_assign(&p.forward_train(x)?)?,
            None => sum.add_assign(x)?,
        }
        let y = sum.map(|v| Activation::Relu.apply(v));
        self.ctx = Some(sum);
        Ok(y)
    }

    /// `extra_ds` holds the surrogate-map gradients for `a` and `b`.
    pub fn backward(&mut self, dy: &Tensor<S>, extra_ds: [Option<&Tensor<S>>; 2]) -> Result<Tensor<S>> {
        let sum = self
            .ctx
            .take()
            .ok_or_else(|| CgError::MissingContext("residual block".into()))?;
        let dsum = activation_backward(&sum, dy, Activation::Relu);
        let dya = self.b.backward(&dsum, extra_ds[1])?;
        let mut dx = self.a.backward(&dya, extra_ds[0])?;
        match &mut self.proj {
            Some(p) => dx.add_assign(&p.backward(&dsum)?)?,
            None => dx.add_assign(&dsum)?,
        }
        Ok(dx)
    }

    /// Inference on one sample.
    pub fn infer(&self, x: &Tensor<S>) -> Result<ResidualOutput<S>> {
        let oa = self.a.infer(x)?;
        let ob = self.b.infer(&oa.0)?;
        let mut sum = ob.0.clone();
        let pc = match &self.proj {
            Some(p) => {
                let (s, c) = p.infer(x)?;
                sum.add_assign(&s)?;
                Some((s, c))
            }
            None => {
                sum.add_assign(x)?;
                None
            }
        };
        Ok((sum.map(|v| Activation::Relu.apply(v)), oa, ob, pc))
    }
}
