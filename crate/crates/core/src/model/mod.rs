//! Sequential networks of plain, gated and residual layers.

mod layers;
mod spec;

use rand::Rng;
use rayon::prelude::*;

pub use layers::{ConvBlock, ConvUnit, LinearLayer, ResidualBlock};
pub use spec::{LayerGeometry, LayerSpec, ModelSpec, UnitSpec};

use crate::error::{CgError, Result};
use crate::gating::{CgBlock, DecisionMap, LayerCounters};
use crate::nn::{ConvSpec, global_avg_pool, global_avg_pool_backward, maxpool_backward, maxpool_forward, Param};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::CombineMode;

#[derive(Clone, Debug)]
pub enum Layer<S> {
    Conv(ConvBlock<S>),
    Gated(CgBlock<S>),
    MaxPool {
        size: usize,
        ctx: Option<(Vec<usize>, Vec<usize>)>,
    },
    GlobalAvgPool {
        ctx: Option<Vec<usize>>,
    },
    Linear(LinearLayer<S>),
    Residual(ResidualBlock<S>),
}

/// Per-layer record of one inference, for every layer that performs MACs.
#[derive(Clone, Debug)]
pub struct LayerTrace<S> {
    pub name: String,
    /// Gate decisions; `None` for ungated layers.
    pub decisions: Option<DecisionMap>,
    pub counters: LayerCounters,
    /// Layer input, when recording was requested.
    pub input: Option<Tensor<S>>,
}

#[derive(Clone, Debug)]
pub struct InferenceTrace<S> {
    pub logits: Tensor<S>,
    /// In the order of [`Model::geometries`].
    pub layers: Vec<LayerTrace<S>>,
}

#[derive(Clone, Debug)]
pub struct Model<S> {
    input: [usize; 3],
    pub layers: Vec<Layer<S>>,
}

fn unit<S: Scalar, R: Rng + ?Sized>(u: &UnitSpec, rng: &mut R) -> Result<ConvUnit<S>> {
    Ok(match u {
        UnitSpec::Conv { conv, activation } => ConvUnit::Plain(ConvBlock::new(*conv, *activation, rng)?),
        UnitSpec::Gated { gate } => ConvUnit::Gated(CgBlock::new(gate.clone(), rng)?),
    })
}

fn unit_spec<S: Scalar>(u: &ConvUnit<S>) -> UnitSpec {
    match u {
        ConvUnit::Plain(c) => UnitSpec::Conv {
            conv: c.conv,
            activation: c.activation,
        },
        ConvUnit::Gated(g) => UnitSpec::Gated { gate: g.cfg.clone() },
    }
}

/// Plain convolution computing what a gated block computes with every gate open.
fn densify<S: Scalar>(g: &CgBlock<S>) -> ConvBlock<S> {
    let co = g.out_channels();
    let perm = g.output_permutation().unwrap_or_else(|| (0..co).collect());
    let row = g.weight.value.len() / co;
    let mut w = g.weight.value.clone();
    let mut gamma = g.gamma.value.clone();
    let mut beta = g.beta.value.clone();
    let mut bn = g.bn2.clone();
    for (src, &dst) in perm.iter().enumerate() {
        w.data_mut()[dst * row..(dst + 1) * row].copy_from_slice(&g.weight.value.data()[src * row..(src + 1) * row]);
        gamma.data_mut()[dst] = g.gamma.value.data()[src];
        beta.data_mut()[dst] = g.beta.value.data()[src];
        bn.mean[dst] = g.bn2.mean[src];
        bn.var[dst] = g.bn2.var[src];
    }
    ConvBlock::from_parts(g.cfg.conv, g.cfg.activation, w, gamma, beta, bn)
}

impl<S: Scalar> Model<S> {
    /// Builds a freshly initialized network.
    pub fn build<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        let _ = spec.resolve()?;
        let mut shape = spec.input;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for l in &spec.layers {
            let layer = match l {
                LayerSpec::Conv { conv, activation } => Layer::Conv(ConvBlock::new(*conv, *activation, rng)?),
                LayerSpec::Gated { gate } => Layer::Gated(CgBlock::new(gate.clone(), rng)?),
                LayerSpec::MaxPool { size } => Layer::MaxPool { size: *size, ctx: None },
                LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool { ctx: None },
                LayerSpec::Linear {
                    in_features,
                    out_features,
                } => Layer::Linear(LinearLayer::new(*in_features, *out_features, rng)),
                LayerSpec::Residual { a, b } => {
                    let proj = spec::projection_spec(a, b, spec::FeatureShape::Map(shape))?
                        .map(|p| ConvBlock::new(p, crate::nn::Activation::Identity, rng))
                        .transpose()?;
                    Layer::Residual(ResidualBlock::new(unit(a, rng)?, unit(b, rng)?, proj))
                }
            };
            shape = match l {
                LayerSpec::Conv { conv, .. } => spec::conv_out(conv, spec::FeatureShape::Map(shape), "")?,
                LayerSpec::Gated { gate } => spec::conv_out(&gate.conv, spec::FeatureShape::Map(shape), "")?,
                LayerSpec::MaxPool { size } => [shape[0], shape[1] / size, shape[2] / size],
                LayerSpec::Residual { a, b } => {
                    let mid = spec::conv_out(a.conv(), spec::FeatureShape::Map(shape), "")?;
                    spec::conv_out(b.conv(), spec::FeatureShape::Map(mid), "")?
                }
                _ => shape,
            };
            layers.push(layer);
        }
        Ok(Self {
            input: spec.input,
            layers,
        })
    }

    /// Topology (including current gate hyperparameters) of this network.
    pub fn spec(&self) -> ModelSpec {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => LayerSpec::Conv {
                    conv: c.conv,
                    activation: c.activation,
                },
                Layer::Gated(g) => LayerSpec::Gated { gate: g.cfg.clone() },
                Layer::MaxPool { size, .. } => LayerSpec::MaxPool { size: *size },
                Layer::GlobalAvgPool { .. } => LayerSpec::GlobalAvgPool,
                Layer::Linear(l) => LayerSpec::Linear {
                    in_features: l.weight.value.dim(1),
                    out_features: l.weight.value.dim(0),
                },
                Layer::Residual(r) => LayerSpec::Residual {
                    a: unit_spec(&r.a),
                    b: unit_spec(&r.b),
                },
            })
            .collect();
        ModelSpec {
            input: self.input,
            layers,
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    /// Geometry of every layer that performs multiply-accumulates.
    pub fn geometries(&self) -> Vec<LayerGeometry> {
        self.spec().resolve().expect("model built from a valid spec").0
    }

    pub fn classes(&self) -> usize {
        self.spec().resolve().expect("model built from a valid spec").1
    }

    /// `(name, spec, full kernel)` of every convolution, in geometry order.
    pub fn conv_weights(&self) -> Vec<(String, ConvSpec, &Tensor<S>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let name = format!("layers.{i}");
            match l {
                Layer::Conv(c) => out.push((name, c.conv, &c.weight.value)),
                Layer::Gated(g) => out.push((name, g.cfg.conv, &g.weight.value)),
                Layer::Residual(r) => {
                    for (part, u) in [("a", &r.a), ("b", &r.b)] {
                        let n = format!("{name}.{part}");
                        match u {
                            ConvUnit::Plain(c) => out.push((n, c.conv, &c.weight.value)),
                            ConvUnit::Gated(g) => out.push((n, g.cfg.conv, &g.weight.value)),
                        }
                    }
                    if let Some(p) = &r.proj {
                        out.push((format!("{name}.proj"), p.conv, &p.weight.value));
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Gated blocks in forward order (residual `a` before `b`).
    pub fn gated(&self) -> Vec<&CgBlock<S>> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Gated(g) => out.push(g),
                Layer::Residual(r) => out.extend([&r.a, &r.b].into_iter().filter_map(|u| u.as_gated())),
                _ => {}
            }
        }
        out
    }

    pub fn gated_mut(&mut self) -> Vec<&mut CgBlock<S>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Gated(g) => out.push(g),
                Layer::Residual(r) => {
                    let ResidualBlock { a, b, .. } = r;
                    out.extend([a, b].into_iter().filter_map(|u| u.as_gated_mut()));
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Conv(c) => out.extend(c.params_mut()),
                Layer::Gated(g) => out.extend(g.params_mut()),
                Layer::Linear(lin) => out.extend(lin.params_mut()),
                Layer::Residual(r) => {
                    for u in [&mut r.a, &mut r.b] {
                        match u {
                            ConvUnit::Plain(c) => out.extend(c.params_mut()),
                            ConvUnit::Gated(g) => out.extend(g.params_mut()),
                        }
                    }
                    if let Some(p) = &mut r.proj {
                        out.extend(p.params_mut());
                    }
                }
                Layer::MaxPool { .. } | Layer::GlobalAvgPool { .. } => {}
            }
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// One SGD step on every parameter, then re-orders two-sided windows.
    pub fn step(&mut self, lr: S, momentum: S, weight_decay: S) {
        for p in self.params_mut() {
            p.step(lr, momentum, weight_decay);
        }
        for g in self.gated_mut() {
            g.clamp_thresholds();
        }
    }

    /// Freezes gate statistics into merged thresholds for inference.
    pub fn freeze(&mut self) {
        for g in self.gated_mut() {
            g.freeze();
        }
    }

    /// Opens (or closes) every gate and excludes the thresholds from training.
    pub fn force_gates(&mut self, open: bool) {
        for g in self.gated_mut() {
            g.gate.force(open);
            for p in g.gate.thresholds.params_mut() {
                p.frozen = true;
            }
        }
    }

    /// Adds `offset` to every threshold (mirrored for two-sided windows, which shrink).
    pub fn offset_deltas(&mut self, offset: f64) {
        for g in self.gated_mut() {
            for (k, p) in g.gate.thresholds.params_mut().into_iter().enumerate() {
                let o = if k == 0 && g.cfg.gate_kind == crate::gating::GateKind::TwoSided {
                    -offset
                } else {
                    offset
                };
                p.value.data_mut().iter_mut().for_each(|v| *v += S::of(o));
            }
            g.clamp_thresholds();
        }
    }

    pub fn set_tau_c(&mut self, tau_c: f64) {
        for g in self.gated_mut() {
            g.cfg.tau_c = tau_c;
        }
    }

    /// Mean threshold over all gated channels.
    pub fn mean_delta(&self) -> f64 {
        let gs = self.gated();
        let (mut s, mut n) = (0.0, 0usize);
        for g in &gs {
            s += g.gate.mean_delta() * g.out_channels() as f64;
            n += g.out_channels();
        }
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }

    /// Training forward on an `(n, c, h, w)` batch; returns `(n, classes)` logits.
    pub fn forward_train(&mut self, x: &Tensor<S>, mode: CombineMode) -> Result<Tensor<S>> {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = match l {
                Layer::Conv(c) => c.forward_train(&h)?,
                Layer::Gated(g) => g.forward_train(&h, mode)?,
                Layer::MaxPool { size, ctx } => {
                    let (y, arg) = maxpool_forward(&h, *size)?;
                    *ctx = Some((arg, h.shape().to_vec()));
                    y
                }
                Layer::GlobalAvgPool { ctx } => {
                    let y = global_avg_pool(&h)?;
                    *ctx = Some(h.shape().to_vec());
                    y
                }
                Layer::Linear(lin) => lin.forward(&h, true)?,
                Layer::Residual(r) => r.forward_train(&h, mode)?,
            };
        }
        Ok(h)
    }

    /// Backward from `dL/dlogits`. `extra_ds` is empty or has one optional
    /// surrogate-map gradient per gated block (in [`Model::gated`] order).
    pub fn backward(&mut self, dlogits: &Tensor<S>, extra_ds: &[Option<Tensor<S>>]) -> Result<Tensor<S>> {
        let total = self.gated().len();
        if !extra_ds.is_empty() && extra_ds.len() != total {
            return Err(CgError::Shape {
                expected: vec![total],
                actual: vec![extra_ds.len()],
            });
        }
        let extra = |k: usize| extra_ds.get(k).and_then(|e| e.as_ref());
        let mut k = total;
        let mut g = dlogits.clone();
        for l in self.layers.iter_mut().rev() {
            g = match l {
                Layer::Conv(c) => c.backward(&g)?,
                Layer::Gated(b) => {
                    k -= 1;
                    b.backward(&g, extra(k))?
                }
                Layer::MaxPool { ctx, .. } => {
                    let (arg, shape) = ctx.take().ok_or_else(|| CgError::MissingContext("max pool".into()))?;
                    maxpool_backward(&g, &arg, &shape)?
                }
                Layer::GlobalAvgPool { ctx } => {
                    let shape = ctx
                        .take()
                        .ok_or_else(|| CgError::MissingContext("global pool".into()))?;
                    global_avg_pool_backward(&g, &shape)?
                }
                Layer::Linear(lin) => lin.backward(&g)?,
                Layer::Residual(r) => {
                    let nb = usize::from(r.b.as_gated().is_some());
                    let na = usize::from(r.a.as_gated().is_some());
                    let kb = (nb == 1).then(|| k - 1);
                    let ka = (na == 1).then(|| k - nb - 1);
                    k -= na + nb;
                    r.backward(&g, [ka.and_then(extra), kb.and_then(extra)])?
                }
            };
        }
        Ok(g)
    }

    /// Inference on one `(c, h, w)` sample. Gate statistics must be frozen.
    pub fn infer_sample(&self, x: &Tensor<S>, record_inputs: bool) -> Result<InferenceTrace<S>> {
        x.expect_shape(&self.input)?;
        let mut h = x.clone();
        let mut traces = Vec::new();
        let rec = |t: &Tensor<S>| record_inputs.then(|| t.clone());
        for (i, l) in self.layers.iter().enumerate() {
            let name = format!("layers.{i}");
            h = match l {
                Layer::Conv(c) => {
                    let (y, counters) = c.infer(&h)?;
                    traces.push(LayerTrace {
                        name,
                        decisions: None,
                        counters,
                        input: rec(&h),
                    });
                    y
                }
                Layer::Gated(g) => {
                    let o = g.infer(&h)?;
                    traces.push(LayerTrace {
                        name,
                        decisions: Some(o.decisions),
                        counters: o.counters,
                        input: rec(&h),
                    });
                    o.y
                }
                Layer::MaxPool { size, .. } => maxpool_forward(&h, *size)?.0,
                Layer::GlobalAvgPool { .. } => global_avg_pool(&h)?,
                Layer::Linear(lin) => {
                    let (y, counters) = lin.infer(&h)?;
                    traces.push(LayerTrace {
                        name,
                        decisions: None,
                        counters,
                        input: rec(&h),
                    });
                    y
                }
                Layer::Residual(r) => {
                    let (y, (ya, da, ca), (_, db, cb), proj) = r.infer(&h)?;
                    traces.push(LayerTrace {
                        name: format!("{name}.a"),
                        decisions: da,
                        counters: ca,
                        input: rec(&h),
                    });
                    traces.push(LayerTrace {
                        name: format!("{name}.b"),
                        decisions: db,
                        counters: cb,
                        input: rec(&ya),
                    });
                    if let Some((_, cp)) = proj {
                        traces.push(LayerTrace {
                            name: format!("{name}.proj"),
                            decisions: None,
                            counters: cp,
                            input: rec(&h),
                        });
                    }
                    y
                }
            };
        }
        let classes = h.len();
        Ok(InferenceTrace {
            logits: h.reshape(&[classes])?,
            layers: traces,
        })
    }

    /// [`Model::infer_sample`] over many samples, in parallel; results keep input order.
    pub fn infer_batch(&self, xs: &[Tensor<S>], record_inputs: bool) -> Result<Vec<InferenceTrace<S>>> {
        xs.par_iter().map(|x| self.infer_sample(x, record_inputs)).collect()
    }

    /// Equivalent network with every gated convolution replaced by the plain
    /// convolution it computes when all gates are open.
    pub fn to_dense(&self) -> Result<Model<S>> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            layers.push(match l {
                Layer::Gated(g) => Layer::Conv(densify(g)),
                Layer::Residual(r) => {
                    let d = |u: &ConvUnit<S>| -> Result<ConvUnit<S>> {
                        Ok(match u {
                            ConvUnit::Gated(g) => ConvUnit::Plain(densify(g)),
                            ConvUnit::Plain(c) => ConvUnit::Plain(c.clone()),
                        })
                    };
                    Layer::Residual(ResidualBlock::new(d(&r.a)?, d(&r.b)?, r.proj.clone()))
                }
                other => other.clone(),
            });
        }
        Ok(Model {
            input: self.input,
            layers,
        })
    }
}
