use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::gating::CgLayerConfig;
use crate::nn::{Activation, ConvSpec};

/// One entry of a network topology.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    /// Convolution + batch norm + activation.
    Conv { conv: ConvSpec, activation: Activation },
    /// Channel-gated convolution + batch norm + activation.
    Gated { gate: CgLayerConfig },
    MaxPool { size: usize },
    GlobalAvgPool,
    Linear { in_features: usize, out_features: usize },
    /// Two convolutions with an identity (or 1x1 projection) shortcut,
    /// followed by ReLU. `b` must use the identity activation.
    Residual { a: UnitSpec, b: UnitSpec },
}

/// Convolution inside a residual block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum UnitSpec {
    Conv { conv: ConvSpec, activation: Activation },
    Gated { gate: CgLayerConfig },
}

impl UnitSpec {
    pub fn conv(&self) -> &ConvSpec {
        match self {
            UnitSpec::Conv { conv, .. } => conv,
            UnitSpec::Gated { gate } => &gate.conv,
        }
    }

    pub fn activation(&self) -> Activation {
        match self {
            UnitSpec::Conv { activation, .. } => *activation,
            UnitSpec::Gated { gate } => gate.activation,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            UnitSpec::Conv { conv, .. } if conv.groups != 1 => {
                Err(config_err("plain convolutions must have groups = 1"))
            }
            UnitSpec::Conv { conv, .. } => conv.validate(),
            UnitSpec::Gated { gate } => gate.validate(),
        }
    }

    fn gate(&self) -> Option<&CgLayerConfig> {
        match self {
            UnitSpec::Conv { .. } => None,
            UnitSpec::Gated { gate } => Some(gate),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// `(c, h, w)` of one input sample.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

/// Feature shape flowing between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum FeatureShape {
    Map([usize; 3]),
    Flat(usize),
}

/// Static description of a layer that performs multiply-accumulates.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerGeometry {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    /// Gate groups; 1 for ungated layers.
    pub groups: usize,
    pub gated: bool,
    /// Two comparisons per activation instead of one.
    pub two_sided: bool,
    /// Channel-wise gate enabled (`tau_c > 0`).
    pub channel_gate: bool,
}

impl LayerGeometry {
    pub fn positions(&self) -> usize {
        self.out_hw.0 * self.out_hw.1
    }

    pub fn dense_macs(&self) -> u64 {
        (self.in_channels * self.kernel * self.kernel * self.positions() * self.out_channels) as u64
    }

    /// MACs per output activation on the base path (all of them when ungated).
    pub fn base_patch_len(&self) -> usize {
        self.in_channels / self.groups * self.kernel * self.kernel
    }

    pub fn conditional_patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel - self.base_patch_len()
    }

    pub fn base_macs(&self) -> u64 {
        (self.base_patch_len() * self.positions() * self.out_channels) as u64
    }

    pub fn conditional_macs_total(&self) -> u64 {
        (self.conditional_patch_len() * self.positions() * self.out_channels) as u64
    }

    pub fn weight_values(&self) -> u64 {
        (self.in_channels * self.kernel * self.kernel * self.out_channels) as u64
    }

    pub fn base_weight_values(&self) -> u64 {
        (self.base_patch_len() * self.out_channels) as u64
    }
}

pub(crate) fn conv_out(spec: &ConvSpec, shape: FeatureShape, what: &str) -> Result<[usize; 3]> {
    let FeatureShape::Map([c, h, w]) = shape else {
        return Err(config_err(format!("{what}: convolution after flattening")));
    };
    if c != spec.in_channels {
        return Err(config_err(format!(
            "{what}: expects {} input channels, receives {c}",
            spec.in_channels
        )));
    }
    spec.validate()?;
    let (ho, wo) = spec.output_hw(h, w)?;
    Ok([spec.out_channels, ho, wo])
}

impl ModelSpec {
    /// Checks layer compatibility and returns the cost-layer geometries and the output width.
    pub fn resolve(&self) -> Result<(Vec<LayerGeometry>, usize)> {
        let mut shape = FeatureShape::Map(self.input);
        let mut geo = Vec::new();
        let geometry = |name: String, spec: &ConvSpec, gate: Option<&CgLayerConfig>, inp: FeatureShape, out: [usize; 3]| {
            let FeatureShape::Map([_, h, w]) = inp else { unreachable!() };
            LayerGeometry {
                name,
                in_channels: spec.in_channels,
                out_channels: spec.out_channels,
                kernel: spec.kernel,
                in_hw: (h, w),
                out_hw: (out[1], out[2]),
                groups: gate.map_or(1, |g| g.groups),
                gated: gate.is_some(),
                two_sided: gate.is_some_and(|g| g.gate_kind == crate::gating::GateKind::TwoSided),
                channel_gate: gate.is_some_and(|g| g.channel_gate_enabled()),
            }
        };
        for (i, layer) in self.layers.iter().enumerate() {
            let name = format!("layers.{i}");
            shape = match layer {
                LayerSpec::Conv { conv, .. } => {
                    if conv.groups != 1 {
                        return Err(config_err(format!("{name}: plain convolutions must have groups = 1")));
                    }
                    let out = conv_out(conv, shape, &name)?;
                    geo.push(geometry(name, conv, None, shape, out));
                    FeatureShape::Map(out)
                }
                LayerSpec::Gated { gate } => {
                    gate.validate().map_err(|e| config_err(format!("{name}: {e}")))?;
                    let out = conv_out(&gate.conv, shape, &name)?;
                    geo.push(geometry(name, &gate.conv, Some(gate), shape, out));
                    FeatureShape::Map(out)
                }
                LayerSpec::MaxPool { size } => {
                    let FeatureShape::Map([c, h, w]) = shape else {
                        return Err(config_err(format!("{name}: pooling after flattening")));
                    };
                    if *size == 0 || h < *size || w < *size {
                        return Err(config_err(format!("{name}: pool {size} on {h}x{w}")));
                    }
                    FeatureShape::Map([c, h / size, w / size])
                }
                LayerSpec::GlobalAvgPool => match shape {
                    FeatureShape::Map([c, _, _]) => FeatureShape::Flat(c),
                    FeatureShape::Flat(_) => return Err(config_err(format!("{name}: pooling after flattening"))),
                },
                LayerSpec::Linear {
                    in_features,
                    out_features,
                } => {
                    let FeatureShape::Flat(f) = shape else {
                        return Err(config_err(format!("{name}: linear layer needs a flattened input")));
                    };
                    if f != *in_features || *out_features == 0 {
                        return Err(config_err(format!("{name}: expects {in_features} features, receives {f}")));
                    }
                    geo.push(LayerGeometry {
                        name,
                        in_channels: f,
                        out_channels: *out_features,
                        kernel: 1,
                        in_hw: (1, 1),
                        out_hw: (1, 1),
                        groups: 1,
                        gated: false,
                        two_sided: false,
                        channel_gate: false,
                    });
                    FeatureShape::Flat(*out_features)
                }
                LayerSpec::Residual { a, b } => {
                    for (part, cfg) in [("a", a), ("b", b)] {
                        cfg.validate().map_err(|e| config_err(format!("{name}.{part}: {e}")))?;
                    }
                    if b.activation() != Activation::Identity {
                        return Err(config_err(format!("{name}.b: activation must be identity")));
                    }
                    let mid = conv_out(a.conv(), shape, &format!("{name}.a"))?;
                    let out = conv_out(b.conv(), FeatureShape::Map(mid), &format!("{name}.b"))?;
                    geo.push(geometry(format!("{name}.a"), a.conv(), a.gate(), shape, mid));
                    geo.push(geometry(format!("{name}.b"), b.conv(), b.gate(), FeatureShape::Map(mid), out));
                    if let Some(p) = projection_spec(a, b, shape)? {
                        let pout = conv_out(&p, shape, &format!("{name}.proj"))?;
                        if pout != out {
                            return Err(config_err(format!("{name}: shortcut shape {pout:?} != {out:?}")));
                        }
                        geo.push(geometry(format!("{name}.proj"), &p, None, shape, pout));
                    } else if shape != FeatureShape::Map(out) {
                        return Err(config_err(format!("{name}: identity shortcut shape mismatch")));
                    }
                    FeatureShape::Map(out)
                }
            };
        }
        match shape {
            FeatureShape::Flat(n) => Ok((geo, n)),
            FeatureShape::Map(_) => Err(config_err("network must end in a flattened (linear) output")),
        }
    }
}

/// 1x1 projection for a residual block whose shortcut changes shape.
pub(crate) fn projection_spec(a: &UnitSpec, b: &UnitSpec, input: FeatureShape) -> Result<Option<ConvSpec>> {
    let FeatureShape::Map([c, _, _]) = input else {
        return Err(config_err("residual block after flattening"));
    };
    let stride = a.conv().stride * b.conv().stride;
    let co = b.conv().out_channels;
    if c == co && stride == 1 {
        Ok(None)
    } else {
        Ok(Some(ConvSpec::new(c, co, 1).with_stride(stride)))
    }
}
