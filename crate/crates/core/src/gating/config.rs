use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::nn::{Activation, ConvSpec};

/// Shape of the gate function.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    /// `theta(x - delta)`: for ReLU-like activations, where small outputs are ineffective.
    SingleSided,
    /// `theta(delta_high - x) * theta(x - delta_low)`: for saturating activations,
    /// where outputs at both extremes are ineffective.
    TwoSided,
}

impl GateKind {
    pub fn for_activation(act: Activation) -> Self {
        if act.saturates_both_sides() {
            GateKind::TwoSided
        } else {
            GateKind::SingleSided
        }
    }
}

pub const DEFAULT_EPSILON: f64 = 4.0;

/// Static hyperparameters of one gated convolution.
///
/// `conv.groups` describes the full (dense) convolution and must be 1; the
/// channel grouping used by the gate is `groups`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "CgLayerConfigRepr")]
pub struct CgLayerConfig {
    pub conv: ConvSpec,
    /// Number of channel groups `G = 1/eta`.
    pub groups: usize,
    pub activation: Activation,
    pub target_threshold: f64,
    /// Channel-wise gate fraction; 0 disables the channel-wise gate.
    pub tau_c: f64,
    /// Sharpness of the smooth gate surrogate used for gradients.
    pub epsilon: f64,
    pub shuffle: bool,
    pub gate_kind: GateKind,
}

/// Serialized form; optional fields take their defaults and the gate kind
/// follows the activation unless given.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CgLayerConfigRepr {
    conv: ConvSpec,
    groups: usize,
    activation: Activation,
    #[serde(default)]
    target_threshold: f64,
    #[serde(default)]
    tau_c: f64,
    #[serde(default = "default_epsilon")]
    epsilon: f64,
    #[serde(default)]
    shuffle: bool,
    #[serde(default)]
    gate_kind: Option<GateKind>,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

impl From<CgLayerConfigRepr> for CgLayerConfig {
    fn from(r: CgLayerConfigRepr) -> Self {
        Self {
            conv: r.conv,
            groups: r.groups,
            activation: r.activation,
            target_threshold: r.target_threshold,
            tau_c: r.tau_c,
            epsilon: r.epsilon,
            shuffle: r.shuffle,
            gate_kind: r.gate_kind.unwrap_or(GateKind::for_activation(r.activation)),
        }
    }
}

impl CgLayerConfig {
    pub fn new(conv: ConvSpec, groups: usize, activation: Activation) -> Self {
        Self {
            conv,
            groups,
            activation,
            target_threshold: 0.0,
            tau_c: 0.0,
            epsilon: DEFAULT_EPSILON,
            shuffle: false,
            gate_kind: GateKind::for_activation(activation),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.conv.validate()?;
        if self.conv.groups != 1 {
            return Err(config_err("gated convolution must be dense (conv.groups = 1)"));
        }
        let g = self.groups;
        if g == 0 || self.conv.in_channels % g != 0 || self.conv.out_channels % g != 0 {
            return Err(config_err(format!(
                "groups {g} must divide in_channels {} and out_channels {}",
                self.conv.in_channels, self.conv.out_channels
            )));
        }
        if !(0.0..=1.0).contains(&self.tau_c) {
            return Err(config_err(format!("tau_c {} outside [0, 1]", self.tau_c)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(config_err(format!("epsilon {} must be positive", self.epsilon)));
        }
        if !self.target_threshold.is_finite() {
            return Err(config_err("target threshold must be finite"));
        }
        Ok(())
    }

    /// Fraction of input channels feeding the base path.
    pub fn eta(&self) -> f64 {
        1.0 / self.groups as f64
    }

    pub fn in_per_group(&self) -> usize {
        self.conv.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.conv.out_channels / self.groups
    }

    /// Spec of the base path, an ordinary grouped convolution.
    pub fn base_conv(&self) -> ConvSpec {
        self.conv.with_groups(self.groups)
    }

    /// Reduction length of the base path per output activation.
    pub fn base_patch_len(&self) -> usize {
        self.in_per_group() * self.conv.kernel * self.conv.kernel
    }

    /// Reduction length of the conditional path per output activation.
    pub fn conditional_patch_len(&self) -> usize {
        (self.conv.in_channels - self.in_per_group()) * self.conv.kernel * self.conv.kernel
    }

    pub fn channel_gate_enabled(&self) -> bool {
        self.tau_c > 0.0
    }
}
