#![allow(dead_code)]

pub mod grad;
pub mod oracle;

use cgnet::gating::{CgBlock, CgLayerConfig, GateKind};
use cgnet::nn::{Activation, ConvSpec};
use cgnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-3;
pub const TOL: f64 = 1e-3;
pub const SEEDS: u64 = 10;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central differences of `loss` with respect to every entry of the slice
/// selected by `get`.
pub fn numeric_grad<T: Clone>(
    base: &T,
    get: impl Fn(&mut T) -> &mut [f64],
    loss: impl Fn(&T) -> f64,
) -> Vec<f64> {
    let n = get(&mut base.clone()).len();
    (0..n)
        .map(|i| {
            let mut plus = base.clone();
            get(&mut plus)[i] += STEP;
            let mut minus = base.clone();
            get(&mut minus)[i] -= STEP;
            (loss(&plus) - loss(&minus)) / (2.0 * STEP)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||)`; 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn assert_grad(what: &str, analytic: &[f64], numeric: &[f64]) {
    let e = rel_err(analytic, numeric);
    assert!(e < TOL, "{what}: relative error {e:e}\nanalytic {analytic:?}\nnumeric {numeric:?}");
}

/// `sum(r * y)`, a loss whose gradient with respect to `y` is `r`.
pub fn probe(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Small random gated block with a random batch input.
pub fn gated_block(seed: u64, act: Activation, kind: GateKind, shuffle: bool) -> (CgBlock<f64>, Tensor<f64>) {
    let mut r = rng(seed);
    let groups = [2, 4][r.random_range(0..2)];
    let ci = groups * r.random_range(1..3);
    let co = groups * r.random_range(1..3);
    let mut cfg = CgLayerConfig::new(ConvSpec::new(ci, co, 3).with_padding(1), groups, act);
    cfg.gate_kind = kind;
    cfg.shuffle = shuffle;
    cfg.epsilon = r.random_range(1.0..4.0);
    let mut b = CgBlock::new(cfg, &mut r).unwrap();
    for p in b.gate.thresholds.params_mut() {
        p.value = Tensor::rand_uniform(&[co], -0.8, 0.8, &mut r);
    }
    b.gate.thresholds.clamp_ordered();
    b.gamma.value = Tensor::rand_uniform(&[co], 0.5, 1.5, &mut r);
    b.beta.value = Tensor::rand_uniform(&[co], -0.5, 0.5, &mut r);
    let x = Tensor::randn(&[2, ci, 4, 4], 1.0, &mut r);
    (b, x)
}

use cgnet::model::{Layer, LayerSpec, Model, ModelSpec, UnitSpec};
use cgnet::nn::RunningStats;

fn jitter_stats<R: Rng>(st: &mut RunningStats<f64>, r: &mut R) {
    for c in 0..st.mean.len() {
        st.mean[c] = r.random_range(-0.5..0.5);
        st.var[c] = r.random_range(0.3..2.0);
    }
}

pub fn jitter_block<R: Rng>(b: &mut CgBlock<f64>, r: &mut R, delta: (f64, f64)) {
    for st in [&mut b.bn1, &mut b.bn2, &mut b.gate.gate_bn] {
        jitter_stats(st, r);
    }
    let co = b.out_channels();
    b.gamma.value = Tensor::rand_uniform(&[co], 0.5, 1.5, r);
    b.beta.value = Tensor::rand_uniform(&[co], -0.3, 0.3, r);
    match b.cfg.gate_kind {
        GateKind::SingleSided => {
            b.gate.thresholds.params_mut()[0].value = Tensor::rand_uniform(&[co], delta.0, delta.1, r);
        }
        GateKind::TwoSided => {
            // window [low, high] around zero, narrower as delta grows
            let mut ps = b.gate.thresholds.params_mut();
            let half: Vec<f64> = (0..co).map(|_| 1.5 - r.random_range(delta.0..delta.1)).collect();
            ps[0].value = Tensor::from_fn(&[co], |c| half[c].max(0.0));
            ps[1].value = Tensor::from_fn(&[co], |c| -half[c].max(0.0));
        }
    }
    b.gate.invalidate();
}

/// Randomizes every running statistic, scale, shift and threshold (thresholds
/// drawn from `delta`), then freezes the gates.
pub fn perturb(model: &mut Model<f64>, seed: u64, delta: (f64, f64)) {
    let mut r = rng(seed);
    for l in &mut model.layers {
        match l {
            Layer::Conv(c) => jitter_stats(&mut c.bn, &mut r),
            Layer::Residual(res) => {
                if let Some(p) = &mut res.proj {
                    jitter_stats(&mut p.bn, &mut r);
                }
                for u in [&mut res.a, &mut res.b] {
                    if let cgnet::model::ConvUnit::Plain(c) = u {
                        jitter_stats(&mut c.bn, &mut r);
                    }
                }
            }
            _ => {}
        }
    }
    for g in model.gated_mut() {
        jitter_block(g, &mut r, delta);
    }
    model.freeze();
}

fn gate_cfg<R: Rng>(r: &mut R, ci: usize, co: usize, g: usize, stride: usize) -> cgnet::gating::CgLayerConfig {
    let act = [Activation::Relu, Activation::Tanh, Activation::Sigmoid][r.random_range(0..3)];
    let mut cfg = CgLayerConfig::new(
        ConvSpec::new(ci, co, 3).with_padding(1).with_stride(stride),
        g,
        act,
    );
    cfg.shuffle = r.random_bool(0.3);
    cfg.tau_c = if r.random_bool(0.5) { r.random_range(0.05..0.6) } else { 0.0 };
    cfg
}

/// Small random topology with plain, gated and residual layers.
pub fn random_spec(seed: u64) -> ModelSpec {
    let mut r = rng(seed);
    let cin = r.random_range(1..3);
    let hw = r.random_range(6..10);
    let g = [2, 4][r.random_range(0..2)];
    let c1 = 4 * r.random_range(1..3);
    let mut layers = vec![LayerSpec::Conv {
        conv: ConvSpec::new(cin, c1, 3).with_padding(1),
        activation: Activation::Relu,
    }];
    let mut c = c1;
    for _ in 0..r.random_range(1..3) {
        let co = 4 * r.random_range(1..4);
        layers.push(LayerSpec::Gated {
            gate: gate_cfg(&mut r, c, co, g, 1),
        });
        c = co;
    }
    if r.random_bool(0.5) {
        layers.push(LayerSpec::MaxPool { size: 2 });
    }
    if r.random_bool(0.6) {
        let stride = r.random_range(1..3);
        let co = if stride == 2 { 2 * c } else { c };
        let mut b = gate_cfg(&mut r, co, co, g, 1);
        b.activation = Activation::Identity;
        b.gate_kind = GateKind::TwoSided;
        layers.push(LayerSpec::Residual {
            a: UnitSpec::Gated {
                gate: gate_cfg(&mut r, c, co, g, stride),
            },
            b: UnitSpec::Gated { gate: b },
        });
        c = co;
    }
    layers.push(LayerSpec::GlobalAvgPool);
    layers.push(LayerSpec::Linear {
        in_features: c,
        out_features: r.random_range(2..6),
    });
    ModelSpec {
        input: [cin, hw, hw],
        layers,
    }
}

/// Built, perturbed and frozen model for [`random_spec`].
pub fn random_model(seed: u64) -> Model<f64> {
    let spec = random_spec(seed);
    let mut m = Model::build(&spec, &mut rng(seed ^ 0x5eed)).unwrap();
    perturb(&mut m, seed ^ 0xbeef, (-1.0, 1.0));
    m
}

pub fn random_inputs(shape: [usize; 3], n: usize, seed: u64) -> Vec<Tensor<f64>> {
    let mut r = rng(seed);
    (0..n).map(|_| Tensor::randn(&shape, 1.0, &mut r)).collect()
}
