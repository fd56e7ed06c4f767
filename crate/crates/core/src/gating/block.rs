//! The channel gating block: parameters and the inference forward path.
//!
//! Per output group `i`, the base path `p = W_p * x_p` is always computed.
//! Where the gate fires, the conditional path `W_r * x_r` is added and the
//! sum goes through BN2; elsewhere `p` goes through BN1. BN1 and BN2 share
//! `gamma`/`beta` but keep separate running statistics.

use rand::Rng;

use crate::error::{CgError, Result};
use crate::gating::config::CgLayerConfig;
use crate::gating::gate::{DecisionMap, GateState};
use crate::gating::grouping::{base_channels, permute_channels, shuffle_permutation};
use crate::nn::conv::im2col;
use crate::nn::{normalize, ConvSpec, Param, RunningStats};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::CgTrainContext;

/// Work actually performed by one layer on one input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LayerCounters {
    pub base_macs: u64,
    pub conditional_macs: u64,
    /// Gate comparisons, including the channel-wise gate.
    pub comparisons: u64,
    /// Weight values loaded.
    pub weights_accessed: u64,
}

impl LayerCounters {
    pub fn macs(&self) -> u64 {
        self.base_macs + self.conditional_macs
    }

    pub fn add(&mut self, o: &LayerCounters) {
        self.base_macs += o.base_macs;
        self.conditional_macs += o.conditional_macs;
        self.comparisons += o.comparisons;
        self.weights_accessed += o.weights_accessed;
    }
}

/// Result of gated inference on one sample.
#[derive(Clone, Debug)]
pub struct BlockOutput<S> {
    pub y: Tensor<S>,
    pub decisions: DecisionMap,
    pub counters: LayerCounters,
}

#[derive(Clone, Debug)]
pub struct CgBlock<S> {
    pub cfg: CgLayerConfig,
    /// Full kernel `W = [W_p | W_r]`, `(c_out, c_in, k, k)`.
    pub weight: Param<S>,
    /// Scale shared by BN1 and BN2.
    pub gamma: Param<S>,
    /// Shift shared by BN1 and BN2.
    pub beta: Param<S>,
    pub bn1: RunningStats<S>,
    pub bn2: RunningStats<S>,
    pub gate: GateState<S>,
    pub(crate) ctx: Option<CgTrainContext<S>>,
}

/// Unfolds one `(c,h,w)` sample into patch-major rows: row `pos` holds the
/// `c*k*k` receptive field of output position `pos`, ordered `(c, kh, kw)`.
pub(crate) fn patches<S: Scalar>(x: &Tensor<S>, spec: &ConvSpec) -> Result<(Vec<S>, usize, usize)> {
    let [_, c, h, w] = x.as_batch_dims()?;
    if x.rank() != 3 || c != spec.in_channels {
        return Err(CgError::Shape {
            expected: vec![spec.in_channels, h, w],
            actual: x.shape().to_vec(),
        });
    }
    let (ho, wo) = spec.output_hw(h, w)?;
    let n = ho * wo;
    let len = spec.in_channels * spec.kernel * spec.kernel;
    let mut cols = vec![S::zero(); len * n];
    im2col(x.data(), h, w, 0, c, spec, ho, wo, &mut cols);
    let mut rows = vec![S::zero(); len * n];
    for r in 0..len {
        for pos in 0..n {
            rows[pos * len + r] = cols[r * n + pos];
        }
    }
    Ok((rows, ho, wo))
}

/// Dot product accumulated in index order.
#[inline]
pub(crate) fn ordered_dot<S: Scalar>(acc: S, a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(acc, |s, (&p, &q)| s + p * q)
}

impl<S: Scalar> CgBlock<S> {
    /// He-initialized block with `gamma = 1`, `beta = 0` and default gate thresholds.
    pub fn new<R: Rng + ?Sized>(cfg: CgLayerConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let shape = cfg.conv.weight_shape();
        let fan_in = cfg.conv.patch_len() as f64;
        let co = cfg.conv.out_channels;
        Ok(Self {
            weight: Param::new(Tensor::randn(&shape, (2.0 / fan_in).sqrt(), rng), true),
            gamma: Param::new(Tensor::ones(&[co]), false),
            beta: Param::new(Tensor::zeros(&[co]), false),
            bn1: RunningStats::new(co),
            bn2: RunningStats::new(co),
            gate: GateState::new(co, cfg.gate_kind),
            cfg,
            ctx: None,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.cfg.conv.out_channels
    }

    /// Output permutation applied after the block (identity without shuffle).
    pub fn output_permutation(&self) -> Option<Vec<usize>> {
        self.cfg
            .shuffle
            .then(|| shuffle_permutation(self.cfg.conv.out_channels, self.cfg.groups))
    }

    /// Trainable parameters: weight, shared scale and shift, thresholds.
    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let CgBlock {
            weight, gamma, beta, gate, ..
        } = self;
        let mut v = vec![weight, gamma, beta];
        v.extend(gate.thresholds.params_mut());
        v
    }

    pub fn freeze(&mut self) {
        self.gate.freeze();
    }

    /// Number of thresholds stored for inference: one or two per channel plus the shared `tau_c`.
    pub fn threshold_count(&self) -> Result<usize> {
        Ok(self.gate.merged()?.threshold_count() + 1)
    }

    /// Gated inference on one `(c_in, h, w)` sample. Requires frozen gate statistics.
    ///
    /// The returned decision map uses the block's own channel order (before any shuffle).
    pub fn infer(&self, x: &Tensor<S>) -> Result<BlockOutput<S>> {
        let merged = self.gate.merged()?;
        let cfg = &self.cfg;
        let (rows, ho, wo) = patches(x, &cfg.conv)?;
        let n = ho * wo;
        let co = cfg.conv.out_channels;
        let ci = cfg.conv.in_channels;
        let kk = cfg.conv.kernel * cfg.conv.kernel;
        let len = ci * kk;
        let cog = cfg.out_per_group();
        let w = self.weight.value.data();

        // base path and activation-wise decisions
        let mut partial = vec![S::zero(); co * n];
        let mut d = vec![false; co * n];
        for o in 0..co {
            let b = base_channels(ci, cfg.groups, o / cog);
            let (bs, be) = (b.start * kk, b.end * kk);
            let wrow = &w[o * len..(o + 1) * len];
            for pos in 0..n {
                let patch = &rows[pos * len..(pos + 1) * len];
                let p = ordered_dot(S::zero(), &wrow[bs..be], &patch[bs..be]);
                partial[o * n + pos] = p;
                d[o * n + pos] = merged.decide(o, p);
            }
        }
        let decisions = DecisionMap::from_decisions(co, ho, wo, d, cfg.tau_c);

        let gamma = self.gamma.value.data();
        let beta = self.beta.value.data();
        let mut y = vec![S::zero(); co * n];
        let mut counters = LayerCounters {
            base_macs: (co * n * cfg.base_patch_len()) as u64,
            comparisons: self.comparisons(n),
            weights_accessed: (co * cfg.base_patch_len()) as u64,
            ..Default::default()
        };
        for o in 0..co {
            let b = base_channels(ci, cfg.groups, o / cog);
            let (bs, be) = (b.start * kk, b.end * kk);
            let wrow = &w[o * len..(o + 1) * len];
            let (s1, s2) = (self.bn1.std(o), self.bn2.std(o));
            if decisions.channel_mask[o] {
                counters.weights_accessed += cfg.conditional_patch_len() as u64;
            }
            for pos in 0..n {
                let p = partial[o * n + pos];
                let z = if decisions.effective(o, pos) {
                    let patch = &rows[pos * len..(pos + 1) * len];
                    let r = ordered_dot(S::zero(), &wrow[..bs], &patch[..bs]);
                    let r = ordered_dot(r, &wrow[be..], &patch[be..]);
                    counters.conditional_macs += cfg.conditional_patch_len() as u64;
                    normalize(p + r, self.bn2.mean[o], s2) * gamma[o] + beta[o]
                } else {
                    normalize(p, self.bn1.mean[o], s1) * gamma[o] + beta[o]
                };
                y[o * n + pos] = cfg.activation.apply(z);
            }
        }
        let mut y = Tensor::from_vec(&[co, ho, wo], y)?;
        if let Some(perm) = self.output_permutation() {
            y = permute_channels(&y, &perm)?;
        }
        Ok(BlockOutput {
            y,
            decisions,
            counters,
        })
    }

    /// Gate comparisons for a layer with `n` output positions.
    pub fn comparisons(&self, n: usize) -> u64 {
        let per_activation = match self.cfg.gate_kind {
            crate::gating::GateKind::SingleSided => 1,
            crate::gating::GateKind::TwoSided => 2,
        };
        let co = self.cfg.conv.out_channels;
        let channel = if self.cfg.channel_gate_enabled() { co } else { 0 };
        (per_activation * n * co + channel) as u64
    }
}
