//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "CGN1"
//! version    u32      1
//! dtype      u8       0 = f32, 1 = f64
//! spec_len   u32
//! spec       spec_len bytes of ModelSpec JSON (layer configs included)
//! count      u32      number of tensor records
//! records    count x { name_len u32, name utf-8, rank u32, dims rank x u64, data }
//! ```
//!
//! Tensor data is row-major in the header dtype. Record names:
//!
//! | layer | records |
//! |-------|---------|
//! | gated `layers.{i}` | `w_base`, `w_cond` (partitioned kernels), `gamma`, `beta`, `bn1.mean`, `bn1.var`, `bn2.mean`, `bn2.var`, `gate_bn.mean`, `gate_bn.var`, `delta` or `delta_high` + `delta_low` |
//! | plain conv | `weight`, `gamma`, `beta`, `bn.mean`, `bn.var` |
//! | linear | `weight`, `bias` |
//! | residual | the above under `.a`, `.b` and `.proj` |
//!
//! Loading rebuilds the network from the embedded spec, fills every record
//! and freezes the gates.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CgError, Result};
use crate::gating::{assemble_weights, split_weights, CgBlock, Thresholds};
use crate::model::{ConvBlock, ConvUnit, Layer, Model, ModelSpec};
use crate::nn::RunningStats;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CGN1";
pub const VERSION: u32 = 1;

fn fmt_err(msg: impl Into<String>) -> CgError {
    CgError::Format(msg.into())
}

fn vec_tensor<S: Scalar>(v: &[S]) -> Tensor<S> {
    Tensor::from_vec(&[v.len()], v.to_vec()).expect("rank-1 shape matches")
}

fn push_stats<S: Scalar>(out: &mut Vec<(String, Tensor<S>)>, prefix: &str, st: &RunningStats<S>) {
    out.push((format!("{prefix}.mean"), vec_tensor(&st.mean)));
    out.push((format!("{prefix}.var"), vec_tensor(&st.var)));
}

fn conv_records<S: Scalar>(out: &mut Vec<(String, Tensor<S>)>, p: &str, c: &ConvBlock<S>) {
    out.push((format!("{p}.weight"), c.weight.value.clone()));
    out.push((format!("{p}.gamma"), c.gamma.value.clone()));
    out.push((format!("{p}.beta"), c.beta.value.clone()));
    push_stats(out, &format!("{p}.bn"), &c.bn);
}

fn gated_records<S: Scalar>(out: &mut Vec<(String, Tensor<S>)>, p: &str, g: &CgBlock<S>) -> Result<()> {
    let (wp, wr) = split_weights(&g.weight.value, g.cfg.groups)?;
    out.push((format!("{p}.w_base"), wp));
    out.push((format!("{p}.w_cond"), wr));
    out.push((format!("{p}.gamma"), g.gamma.value.clone()));
    out.push((format!("{p}.beta"), g.beta.value.clone()));
    push_stats(out, &format!("{p}.bn1"), &g.bn1);
    push_stats(out, &format!("{p}.bn2"), &g.bn2);
    push_stats(out, &format!("{p}.gate_bn"), &g.gate.gate_bn);
    match &g.gate.thresholds {
        Thresholds::SingleSided { delta } => out.push((format!("{p}.delta"), delta.value.clone())),
        Thresholds::TwoSided { high, low } => {
            out.push((format!("{p}.delta_high"), high.value.clone()));
            out.push((format!("{p}.delta_low"), low.value.clone()));
        }
    }
    Ok(())
}

fn unit_records<S: Scalar>(out: &mut Vec<(String, Tensor<S>)>, p: &str, u: &ConvUnit<S>) -> Result<()> {
    match u {
        ConvUnit::Plain(c) => conv_records(out, p, c),
        ConvUnit::Gated(g) => gated_records(out, p, g)?,
    }
    Ok(())
}

/// Named tensors in file order.
pub fn records<S: Scalar>(model: &Model<S>) -> Result<Vec<(String, Tensor<S>)>> {
    let mut out = Vec::new();
    for (i, l) in model.layers.iter().enumerate() {
        let p = format!("layers.{i}");
        match l {
            Layer::Conv(c) => conv_records(&mut out, &p, c),
            Layer::Gated(g) => gated_records(&mut out, &p, g)?,
            Layer::Linear(lin) => {
                out.push((format!("{p}.weight"), lin.weight.value.clone()));
                out.push((format!("{p}.bias"), lin.bias.value.clone()));
            }
            Layer::Residual(r) => {
                unit_records(&mut out, &format!("{p}.a"), &r.a)?;
                unit_records(&mut out, &format!("{p}.b"), &r.b)?;
                if let Some(proj) = &r.proj {
                    conv_records(&mut out, &format!("{p}.proj"), proj);
                }
            }
            Layer::MaxPool { .. } | Layer::GlobalAvgPool { .. } => {}
        }
    }
    Ok(out)
}

pub fn write_checkpoint<S: Scalar, W: Write>(model: &Model<S>, mut out: W) -> Result<()> {
    let spec = serde_json::to_vec(&model.spec())?;
    let recs = records(model)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(S::DTYPE.code());
    buf.extend_from_slice(&(spec.len() as u32).to_le_bytes());
    buf.extend_from_slice(&spec);
    buf.extend_from_slice(&(recs.len() as u32).to_le_bytes());
    for (name, t) in &recs {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut buf);
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn save<S: Scalar>(model: &Model<S>, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(model, std::io::BufWriter::new(f))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(fmt_err(format!("truncated checkpoint while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parsed container contents before they are bound to a network.
#[derive(Clone, Debug)]
pub struct Checkpoint<S> {
    pub dtype: DType,
    pub spec: ModelSpec,
    pub tensors: BTreeMap<String, Tensor<S>>,
}

/// Parses a container. Values stored in the other dtype are converted.
pub fn parse<S: Scalar>(bytes: &[u8]) -> Result<Checkpoint<S>> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(fmt_err("bad magic, not a CGN1 checkpoint"));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(fmt_err(format!("unsupported checkpoint version {version}")));
    }
    let code = c.take(1, "dtype")?[0];
    let dtype = DType::from_code(code).ok_or_else(|| fmt_err(format!("unknown dtype code {code}")))?;
    let spec_len = c.u32("spec length")? as usize;
    let spec: ModelSpec = serde_json::from_slice(c.take(spec_len, "spec")?)?;
    let count = c.u32("record count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|_| fmt_err("record name is not utf-8"))?
            .to_string();
        let rank = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(c.u64("dims")?).map_err(|_| fmt_err("dimension overflows usize"))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or_else(|| fmt_err(format!("{name}: tensor size overflows")))?;
        let raw = c.take(n, &name)?;
        let data: Vec<S> = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|b| S::of(f32::read_le(b) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|b| S::of(f64::read_le(b))).collect(),
        };
        if tensors.insert(name.clone(), Tensor::from_vec(&shape, data)?).is_some() {
            return Err(fmt_err(format!("duplicate record {name}")));
        }
    }
    if c.pos != bytes.len() {
        return Err(fmt_err("trailing bytes after the last record"));
    }
    Ok(Checkpoint { dtype, spec, tensors })
}

struct Binder<S> {
    tensors: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Binder<S> {
    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Tensor<S>> {
        let t = self
            .tensors
            .remove(name)
            .ok_or_else(|| fmt_err(format!("missing record {name}")))?;
        if t.shape() != shape {
            return Err(fmt_err(format!(
                "record {name} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    fn fill(&mut self, name: &str, dst: &mut Tensor<S>) -> Result<()> {
        *dst = self.take(name, &dst.shape().to_vec())?;
        Ok(())
    }

    fn fill_vec(&mut self, name: &str, dst: &mut Vec<S>) -> Result<()> {
        *dst = self.take(name, &[dst.len()])?.into_data();
        Ok(())
    }

    fn stats(&mut self, p: &str, st: &mut RunningStats<S>) -> Result<()> {
        self.fill_vec(&format!("{p}.mean"), &mut st.mean)?;
        self.fill_vec(&format!("{p}.var"), &mut st.var)?;
        if st.var.iter().any(|v| *v < S::zero() || !v.is_finite()) {
            return Err(fmt_err(format!("{p}.var has negative or non-finite entries")));
        }
        Ok(())
    }

    fn conv(&mut self, p: &str, c: &mut ConvBlock<S>) -> Result<()> {
        self.fill(&format!("{p}.weight"), &mut c.weight.value)?;
        self.fill(&format!("{p}.gamma"), &mut c.gamma.value)?;
        self.fill(&format!("{p}.beta"), &mut c.beta.value)?;
        self.stats(&format!("{p}.bn"), &mut c.bn)
    }

    fn gated(&mut self, p: &str, g: &mut CgBlock<S>) -> Result<()> {
        let (wp, wr) = split_weights(&g.weight.value, g.cfg.groups)?;
        let wp = self.take(&format!("{p}.w_base"), wp.shape())?;
        let wr = self.take(&format!("{p}.w_cond"), wr.shape())?;
        g.weight.value = assemble_weights(&wp, &wr)?;
        self.fill(&format!("{p}.gamma"), &mut g.gamma.value)?;
        self.fill(&format!("{p}.beta"), &mut g.beta.value)?;
        self.stats(&format!("{p}.bn1"), &mut g.bn1)?;
        self.stats(&format!("{p}.bn2"), &mut g.bn2)?;
        self.stats(&format!("{p}.gate_bn"), &mut g.gate.gate_bn)?;
        match &mut g.gate.thresholds {
            Thresholds::SingleSided { delta } => self.fill(&format!("{p}.delta"), &mut delta.value)?,
            Thresholds::TwoSided { high, low } => {
                self.fill(&format!("{p}.delta_high"), &mut high.value)?;
                self.fill(&format!("{p}.delta_low"), &mut low.value)?;
            }
        }
        g.gate.invalidate();
        Ok(())
    }

    fn unit(&mut self, p: &str, u: &mut ConvUnit<S>) -> Result<()> {
        match u {
            ConvUnit::Plain(c) => self.conv(p, c),
            ConvUnit::Gated(g) => self.gated(p, g),
        }
    }
}

/// Rebuilds a network from parsed contents; every record must be consumed.
pub fn bind<S: Scalar>(ck: Checkpoint<S>) -> Result<Model<S>> {
    // Initial values are overwritten by the records.
    let mut model = Model::build(&ck.spec, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut b = Binder { tensors: ck.tensors };
    for (i, l) in model.layers.iter_mut().enumerate() {
        let p = format!("layers.{i}");
        match l {
            Layer::Conv(c) => b.conv(&p, c)?,
            Layer::Gated(g) => b.gated(&p, g)?,
            Layer::Linear(lin) => {
                b.fill(&format!("{p}.weight"), &mut lin.weight.value)?;
                b.fill(&format!("{p}.bias"), &mut lin.bias.value)?;
            }
            Layer::Residual(r) => {
                b.unit(&format!("{p}.a"), &mut r.a)?;
                b.unit(&format!("{p}.b"), &mut r.b)?;
                if let Some(proj) = &mut r.proj {
                    b.conv(&format!("{p}.proj"), proj)?;
                }
            }
            Layer::MaxPool { .. } | Layer::GlobalAvgPool { .. } => {}
        }
    }
    if let Some(extra) = b.tensors.keys().next() {
        return Err(fmt_err(format!("unexpected record {extra}")));
    }
    model.freeze();
    Ok(model)
}

pub fn read_checkpoint<S: Scalar, R: Read>(mut input: R) -> Result<Model<S>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    bind(parse(&bytes)?)
}

pub fn load<S: Scalar>(path: impl AsRef<Path>) -> Result<Model<S>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| {
        CgError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    bind(parse(&bytes)?)
}
