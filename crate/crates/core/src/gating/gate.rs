//! Gate functions: Heaviside decisions on normalized partial sums, the
//! inference-time merged gate, and the channel-wise gate.

use crate::error::{config_err, CgError, Result};
use crate::gating::config::GateKind;
use crate::nn::{batchnorm_forward, normalize, Param, RunningStats};
use crate::scalar::{highest_satisfying, lowest_satisfying, Scalar};
use crate::tensor::Tensor;

/// Threshold that keeps every gate open (all activations take the conditional path).
pub const OPEN_DELTA: f64 = -1e6;
/// Threshold that closes every gate.
pub const CLOSED_DELTA: f64 = 1e6;

/// Elementwise step function: 1 where `x >= 0`, else 0.
pub fn heaviside<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| if v >= S::zero() { S::one() } else { S::zero() })
}

/// Learnable per-output-channel thresholds.
#[derive(Clone, Debug)]
pub enum Thresholds<S> {
    SingleSided { delta: Param<S> },
    TwoSided { high: Param<S>, low: Param<S> },
}

impl<S: Scalar> Thresholds<S> {
    pub fn kind(&self) -> GateKind {
        match self {
            Thresholds::SingleSided { .. } => GateKind::SingleSided,
            Thresholds::TwoSided { .. } => GateKind::TwoSided,
        }
    }

    /// Decision for an already-normalized gate input of channel `c`.
    #[inline]
    pub fn decide(&self, c: usize, xn: S) -> bool {
        match self {
            Thresholds::SingleSided { delta } => xn - delta.value.data()[c] >= S::zero(),
            Thresholds::TwoSided { high, low } => {
                high.value.data()[c] - xn >= S::zero() && xn - low.value.data()[c] >= S::zero()
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        match self {
            Thresholds::SingleSided { delta } => vec![delta],
            Thresholds::TwoSided { high, low } => vec![high, low],
        }
    }

    pub fn params(&self) -> Vec<&Param<S>> {
        match self {
            Thresholds::SingleSided { delta } => vec![delta],
            Thresholds::TwoSided { high, low } => vec![high, low],
        }
    }

    /// Keep two-sided windows well-formed: `low <= high` per channel.
    pub fn clamp_ordered(&mut self) {
        if let Thresholds::TwoSided { high, low } = self {
            for (h, l) in high.value.data_mut().iter_mut().zip(low.value.data_mut()) {
                if *h < *l {
                    let mid = (*h + *l) / S::of(2.0);
                    *h = mid;
                    *l = mid;
                }
            }
        }
    }
}

/// Per-channel thresholds on the raw partial sum, equivalent to
/// normalizing with frozen running stats and comparing against delta.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedGate<S> {
    pub lower: Vec<S>,
    /// Upper bound of the window, two-sided gates only.
    pub upper: Option<Vec<S>>,
}

impl<S: Scalar> MergedGate<S> {
    #[inline]
    pub fn decide(&self, c: usize, x: S) -> bool {
        x >= self.lower[c] && self.upper.as_ref().is_none_or(|u| x <= u[c])
    }

    /// Number of stored thresholds.
    pub fn threshold_count(&self) -> usize {
        self.lower.len() + self.upper.as_ref().map_or(0, Vec::len)
    }
}

#[derive(Clone, Debug)]
pub struct GateState<S> {
    pub thresholds: Thresholds<S>,
    /// Affine-free normalizer over the partial sums.
    pub gate_bn: RunningStats<S>,
    merged: Option<MergedGate<S>>,
}

impl<S: Scalar> GateState<S> {
    /// Single-sided gates start at delta = 0; two-sided windows at [-1, 1].
    pub fn new(channels: usize, kind: GateKind) -> Self {
        let thresholds = match kind {
            GateKind::SingleSided => Thresholds::SingleSided {
                delta: Param::new(Tensor::zeros(&[channels]), false),
            },
            GateKind::TwoSided => Thresholds::TwoSided {
                high: Param::new(Tensor::ones(&[channels]), false),
                low: Param::new(Tensor::full(&[channels], -S::one()), false),
            },
        };
        Self {
            thresholds,
            gate_bn: RunningStats::new(channels),
            merged: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gate_bn.channels()
    }

    pub fn kind(&self) -> GateKind {
        self.thresholds.kind()
    }

    /// Folds the running stats into exact per-channel thresholds on the raw partial sum.
    pub fn freeze(&mut self) {
        let c = self.channels();
        let stats = &self.gate_bn;
        let merged = match &self.thresholds {
            Thresholds::SingleSided { delta } => MergedGate {
                lower: (0..c)
                    .map(|ch| {
                        let (m, s, d) = (stats.mean[ch], stats.std(ch), delta.value.data()[ch]);
                        lowest_satisfying(|x: S| normalize(x, m, s) - d >= S::zero())
                    })
                    .collect(),
                upper: None,
            },
            Thresholds::TwoSided { high, low } => MergedGate {
                lower: (0..c)
                    .map(|ch| {
                        let (m, s, d) = (stats.mean[ch], stats.std(ch), low.value.data()[ch]);
                        lowest_satisfying(|x: S| normalize(x, m, s) - d >= S::zero())
                    })
                    .collect(),
                upper: Some(
                    (0..c)
                        .map(|ch| {
                            let (m, s, d) = (stats.mean[ch], stats.std(ch), high.value.data()[ch]);
                            highest_satisfying(|x: S| d - normalize(x, m, s) >= S::zero())
                        })
                        .collect(),
                ),
            },
        };
        self.merged = Some(merged);
    }

    /// Drops the merged thresholds; called whenever thresholds or stats change.
    pub fn invalidate(&mut self) {
        self.merged = None;
    }

    pub fn is_frozen(&self) -> bool {
        self.merged.is_some()
    }

    pub fn merged(&self) -> Result<&MergedGate<S>> {
        self.merged
            .as_ref()
            .ok_or_else(|| CgError::State("gate statistics are not frozen; call freeze() first".into()))
    }

    /// Sets every threshold so that all gates are open (`open = true`) or closed.
    pub fn force(&mut self, open: bool) {
        let (lo, hi) = if open { (OPEN_DELTA, CLOSED_DELTA) } else { (CLOSED_DELTA, OPEN_DELTA) };
        match &mut self.thresholds {
            Thresholds::SingleSided { delta } => delta.value.fill(S::of(lo)),
            Thresholds::TwoSided { high, low } => {
                high.value.fill(S::of(hi));
                low.value.fill(S::of(lo));
            }
        }
        self.invalidate();
    }

    /// Sets single-sided thresholds (or the symmetric window half-width for two-sided gates).
    pub fn set_delta(&mut self, v: f64) {
        match &mut self.thresholds {
            Thresholds::SingleSided { delta } => delta.value.fill(S::of(v)),
            Thresholds::TwoSided { high, low } => {
                high.value.fill(S::of(-v));
                low.value.fill(S::of(v));
            }
        }
        self.invalidate();
    }

    /// Mean delta (single-sided) or mean lower threshold mirrored against the upper one (two-sided).
    pub fn mean_delta(&self) -> f64 {
        let mean = |p: &Param<S>| p.value.data().iter().map(|v| v.as_f64()).sum::<f64>() / p.value.len() as f64;
        match &self.thresholds {
            Thresholds::SingleSided { delta } => mean(delta),
            Thresholds::TwoSided { high, low } => (mean(low) - mean(high)) / 2.0,
        }
    }
}

/// Gate decisions for a `(c,h,w)` or `(n,c,h,w)` partial sum.
///
/// Training mode normalizes with batch statistics (updating the gate's
/// running stats) and thresholds against delta; inference mode uses the
/// merged gate.
pub fn gate_forward<S: Scalar>(partial: &Tensor<S>, gate: &mut GateState<S>, training: bool) -> Result<Tensor<S>> {
    if !training {
        return merged_gate(partial, gate);
    }
    let (xg, _) = batchnorm_forward(partial, &mut gate.gate_bn, None, true)?;
    gate.invalidate();
    decide_normalized(&xg, &gate.thresholds)
}

/// Thresholds an already-normalized gate input.
pub fn decide_normalized<S: Scalar>(xg: &Tensor<S>, th: &Thresholds<S>) -> Result<Tensor<S>> {
    let [_, c, h, w] = xg.as_batch_dims()?;
    let hw = h * w;
    let mut d = xg.clone();
    for (i, v) in d.data_mut().iter_mut().enumerate() {
        let ch = (i / hw) % c;
        *v = if th.decide(ch, *v) { S::one() } else { S::zero() };
    }
    Ok(d)
}

/// Inference gate with normalization folded into the thresholds.
pub fn merged_gate<S: Scalar>(partial: &Tensor<S>, gate: &GateState<S>) -> Result<Tensor<S>> {
    let merged = gate.merged()?;
    let [_, c, h, w] = partial.as_batch_dims()?;
    if c != gate.channels() {
        return Err(config_err(format!("partial sum has {c} channels, gate has {}", gate.channels())));
    }
    let hw = h * w;
    let mut d = partial.clone();
    for (i, v) in d.data_mut().iter_mut().enumerate() {
        let ch = (i / hw) % c;
        *v = if merged.decide(ch, *v) { S::one() } else { S::zero() };
    }
    Ok(d)
}

/// Normalize with the frozen running stats, then threshold. Two-step
/// counterpart of [`merged_gate`].
pub fn normalized_gate<S: Scalar>(partial: &Tensor<S>, gate: &GateState<S>) -> Result<Tensor<S>> {
    let [_, c, h, w] = partial.as_batch_dims()?;
    let hw = h * w;
    let st = &gate.gate_bn;
    let mut d = partial.clone();
    for (i, v) in d.data_mut().iter_mut().enumerate() {
        let ch = (i / hw) % c;
        let xn = normalize(*v, st.mean[ch], st.std(ch));
        *v = if gate.thresholds.decide(ch, xn) { S::one() } else { S::zero() };
    }
    Ok(d)
}

/// Channel-wise gate: channel `i` survives iff `sum(d[i]) - tau_c * h * w >= 0`.
pub fn channel_gate(d: &[bool], channels: usize, tau_c: f64) -> Vec<bool> {
    let hw = d.len() / channels.max(1);
    (0..channels)
        .map(|c| {
            let taken = d[c * hw..(c + 1) * hw].iter().filter(|&&b| b).count();
            taken as f64 - tau_c * hw as f64 >= 0.0
        })
        .collect()
}

/// Binary pruning decisions of one gated layer for one input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecisionMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Activation-wise decisions, `(c, h, w)` row-major; `true` takes the conditional path.
    pub d: Vec<bool>,
    /// Channel-wise gate output.
    pub channel_mask: Vec<bool>,
}

impl DecisionMap {
    pub fn new(channels: usize, height: usize, width: usize, d: Vec<bool>, channel_mask: Vec<bool>) -> Self {
        debug_assert_eq!(d.len(), channels * height * width);
        debug_assert_eq!(channel_mask.len(), channels);
        Self {
            channels,
            height,
            width,
            d,
            channel_mask,
        }
    }

    /// Decisions with the channel mask applied.
    pub fn from_decisions(channels: usize, height: usize, width: usize, d: Vec<bool>, tau_c: f64) -> Self {
        let mask = if tau_c > 0.0 {
            channel_gate(&d, channels, tau_c)
        } else {
            vec![true; channels]
        };
        Self::new(channels, height, width, d, mask)
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn effective(&self, c: usize, pos: usize) -> bool {
        self.channel_mask[c] && self.d[c * self.positions() + pos]
    }

    /// Number of positions of channel `c` that take the conditional path.
    pub fn effective_count(&self, c: usize) -> usize {
        if !self.channel_mask[c] {
            return 0;
        }
        let hw = self.positions();
        self.d[c * hw..(c + 1) * hw].iter().filter(|&&b| b).count()
    }

    pub fn total_effective(&self) -> usize {
        (0..self.channels).map(|c| self.effective_count(c)).sum()
    }
}

/// Fraction of activations whose conditional path is skipped.
pub fn pruning_ratio(dm: &DecisionMap) -> f64 {
    let total = dm.d.len();
    if total == 0 {
        return 0.0;
    }
    1.0 - dm.total_effective() as f64 / total as f64
}
