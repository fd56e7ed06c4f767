//! Scalar and brute-force oracles, shared by the test targets.

use cgnet::analysis::{count_flops, count_weight_accesses};
use cgnet::gating::{CgBlock, CgLayerConfig, GateKind, GateState, Thresholds};
use cgnet::model::Model;
use cgnet::nn::{Activation, ConvSpec};
use cgnet::Tensor;
use rand::Rng;

use super::*;

/// Evaluates the gated block one output activation at a time.
pub fn scalar_block(b: &CgBlock<f64>, x: &Tensor<f64>) -> Vec<f64> {
    let cfg = &b.cfg;
    let (ci, co, k) = (cfg.conv.in_channels, cfg.conv.out_channels, cfg.conv.kernel);
    let (s, pad) = (cfg.conv.stride, cfg.conv.padding as isize);
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let (ho, wo) = cfg.conv.output_hw(h, w).unwrap();
    let (cig, cog) = (ci / cfg.groups, co / cfg.groups);
    let wt = b.weight.value.data();
    let tap = |o: usize, c: usize, oy: usize, ox: usize, kh: usize, kw: usize| {
        let iy = (oy * s + kh) as isize - pad;
        let ix = (ox * s + kw) as isize - pad;
        let v = if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
            0.0
        } else {
            x.data()[(c * h + iy as usize) * w + ix as usize]
        };
        wt[((o * ci + c) * k + kh) * k + kw] * v
    };
    let sum_over = |o: usize, chans: &mut dyn Iterator<Item = usize>, oy: usize, ox: usize| {
        let mut acc = 0.0;
        for c in chans {
            for kh in 0..k {
                for kw in 0..k {
                    acc += tap(o, c, oy, ox, kh, kw);
                }
            }
        }
        acc
    };
    let gs = &b.gate.gate_bn;
    let decide = |o: usize, p: f64| {
        let xn = (p - gs.mean[o]) / (gs.var[o] + gs.eps).sqrt();
        match &b.gate.thresholds {
            Thresholds::SingleSided { delta } => xn - delta.value.data()[o] >= 0.0,
            Thresholds::TwoSided { high, low } => {
                high.value.data()[o] - xn >= 0.0 && xn - low.value.data()[o] >= 0.0
            }
        }
    };
    let n = ho * wo;
    let mut partial = vec![0.0; co * n];
    let mut d = vec![false; co * n];
    for o in 0..co {
        let grp = o / cog;
        for oy in 0..ho {
            for ox in 0..wo {
                let p = sum_over(o, &mut (grp * cig..(grp + 1) * cig), oy, ox);
                partial[o * n + oy * wo + ox] = p;
                d[o * n + oy * wo + ox] = decide(o, p);
            }
        }
    }
    let mut y = vec![0.0; co * n];
    let (g, bt) = (b.gamma.value.data(), b.beta.value.data());
    for o in 0..co {
        let grp = o / cog;
        let taken = d[o * n..(o + 1) * n].iter().filter(|&&v| v).count();
        let live = cfg.tau_c <= 0.0 || taken as f64 - cfg.tau_c * n as f64 >= 0.0;
        for oy in 0..ho {
            for ox in 0..wo {
                let i = o * n + oy * wo + ox;
                let z = if live && d[i] {
                    let r = sum_over(o, &mut (0..ci).filter(|c| c / cig != grp), oy, ox);
                    (partial[i] + r - b.bn2.mean[o]) / (b.bn2.var[o] + b.bn2.eps).sqrt() * g[o] + bt[o]
                } else {
                    (partial[i] - b.bn1.mean[o]) / (b.bn1.var[o] + b.bn1.eps).sqrt() * g[o] + bt[o]
                };
                y[i] = cfg.activation.apply(z);
            }
        }
    }
    match b.output_permutation() {
        None => y,
        Some(perm) => {
            let mut out = vec![0.0; co * n];
            for (src, &dst) in perm.iter().enumerate() {
                out[dst * n..(dst + 1) * n].copy_from_slice(&y[src * n..(src + 1) * n]);
            }
            out
        }
    }
}

/// Counts MACs and weight values by visiting every tap of every layer.
pub fn brute_force_counts(m: &Model<f64>, x: &Tensor<f64>) -> (u64, u64) {
    let geos = m.geometries();
    let t = m.infer_sample(x, false).unwrap();
    let (mut macs, mut weights) = (0u64, 0u64);
    for (geo, lt) in geos.iter().zip(&t.layers) {
        let cig = geo.in_channels / geo.groups;
        let cog = geo.out_channels / geo.groups;
        for o in 0..geo.out_channels {
            let mut channel_live = false;
            for pos in 0..geo.positions() {
                for c in 0..geo.in_channels {
                    let base = !geo.gated || c / cig == o / cog;
                    let live = lt.decisions.as_ref().is_none_or(|dm| dm.effective(o, pos));
                    if base || live {
                        macs += (geo.kernel * geo.kernel) as u64;
                    }
                }
            }
            if let Some(dm) = &lt.decisions {
                channel_live = dm.channel_mask[o];
            }
            for c in 0..geo.in_channels {
                let base = !geo.gated || c / cig == o / cog;
                if base || channel_live {
                    weights += (geo.kernel * geo.kernel) as u64;
                }
            }
        }
    }
    (macs, weights)
}


pub fn block_matches_scalar_evaluation_bitwise() {
    for seed in 0..50 {
        let mut r = rng(2000 + seed);
        let g = [1, 2, 4][r.random_range(0..3)];
        let act = [Activation::Relu, Activation::Tanh, Activation::Sigmoid, Activation::Identity][r.random_range(0..4)];
        let k = [1, 3][r.random_range(0..2)];
        let conv = ConvSpec::new(g * r.random_range(1..3), g * r.random_range(1..3), k)
            .with_padding(r.random_range(0..k.div_ceil(2) + 1).min(k))
            .with_stride(r.random_range(1..3));
        let mut cfg = CgLayerConfig::new(conv, g, act);
        cfg.shuffle = g > 1 && r.random_bool(0.5);
        cfg.tau_c = if r.random_bool(0.5) { r.random_range(0.05..0.7) } else { 0.0 };
        let mut b = CgBlock::<f64>::new(cfg, &mut r).unwrap();
        jitter_block(&mut b, &mut r, (-1.0, 1.0));
        b.freeze();
        let x = Tensor::randn(&[b.cfg.conv.in_channels, 6, 5], 1.0, &mut r);
        let got = b.infer(&x).unwrap().y;
        let want = scalar_block(&b, &x);
        let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(got.data()), bits(&want), "seed {seed}");
    }
}

pub fn analytic_counts_equal_instrumented_and_brute_force() {
    for seed in 0..20 {
        let m = random_model(3000 + seed);
        let geos = m.geometries();
        let xs = random_inputs(m.input_shape(), 3, seed);
        let traces = m.infer_batch(&xs, false).unwrap();
        let rep = count_flops(&geos, &traces).unwrap();
        let instrumented: u64 = traces.iter().flat_map(|t| &t.layers).map(|l| l.counters.macs()).sum();
        let inst_weights: u64 = traces.iter().flat_map(|t| &t.layers).map(|l| l.counters.weights_accessed).sum();
        let (mut bf_macs, mut bf_weights) = (0, 0);
        for x in &xs {
            let (a, b) = brute_force_counts(&m, x);
            bf_macs += a;
            bf_weights += b;
        }
        assert_eq!(rep.executed_flops, instrumented, "seed {seed}");
        assert_eq!(rep.executed_flops, bf_macs, "seed {seed}");
        assert_eq!(rep.weight_values_accessed, inst_weights, "seed {seed}");
        assert_eq!(rep.weight_values_accessed, bf_weights, "seed {seed}");
        let per_sample = count_weight_accesses(&geos, &traces).unwrap();
        assert_eq!(per_sample.iter().sum::<u64>(), bf_weights);
        let comparisons: u64 = traces.iter().flat_map(|t| &t.layers).map(|l| l.counters.comparisons).sum();
        assert_eq!(rep.gate_comparisons, comparisons);
    }
}

pub fn gate_overhead_identity() {
    for seed in 0..20 {
        let mut r = rng(4000 + seed);
        let g = [2, 4][r.random_range(0..2)];
        let co = g * r.random_range(1..4);
        let mut cfg = CgLayerConfig::new(
            ConvSpec::new(g * 2, co, 3).with_padding(r.random_range(0..2)).with_stride(r.random_range(1..3)),
            g,
            Activation::Relu,
        );
        cfg.tau_c = r.random_range(0.05..0.5);
        let mut b = CgBlock::<f64>::new(cfg, &mut r).unwrap();
        jitter_block(&mut b, &mut r, (-1.0, 1.0));
        b.freeze();
        let x = Tensor::randn(&[g * 2, 7, 7], 1.0, &mut r);
        let o = b.infer(&x).unwrap();
        let hw = (o.decisions.height * o.decisions.width) as u64;
        assert_eq!(o.counters.comparisons, (hw + 1) * co as u64);
        assert_eq!(b.threshold_count().unwrap(), co + 1);

        // two comparisons per activation bound a two-sided window
        let mut two = b.clone();
        two.cfg.activation = Activation::Tanh;
        two.cfg.gate_kind = GateKind::TwoSided;
        two.gate = GateState::new(co, GateKind::TwoSided);
        two.freeze();
        let o = two.infer(&x).unwrap();
        assert_eq!(o.counters.comparisons, (2 * hw + 1) * co as u64);
        assert_eq!(two.threshold_count().unwrap(), 2 * co + 1);

        // without the channel gate
        b.cfg.tau_c = 0.0;
        assert_eq!(b.infer(&x).unwrap().counters.comparisons, hw * co as u64);
    }
}

/// Random merged-gate cases, each comparing the folded thresholds with
/// normalize-then-threshold at random points and at the exact boundaries.
/// Returns the number of disagreeing decisions.
pub fn merged_gate_mismatches(cases: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    let mut bad = 0;
    for i in 0..cases {
        let kind = if i % 2 == 0 { GateKind::SingleSided } else { GateKind::TwoSided };
        let c = 3;
        let mut gate = GateState::<f64>::new(c, kind);
        for ch in 0..c {
            gate.gate_bn.mean[ch] = r.random_range(-3.0..3.0);
            gate.gate_bn.var[ch] = 10f64.powf(r.random_range(-6.0..2.0));
        }
        for p in gate.thresholds.params_mut() {
            p.value = Tensor::rand_uniform(&[c], -2.0, 2.0, &mut r);
        }
        gate.thresholds.clamp_ordered();
        gate.freeze();
        let m = gate.merged().unwrap().clone();
        let n = 8;
        let mut x: Vec<f64> = (0..c * n).map(|_| r.random_range(-6.0..6.0)).collect();
        for ch in 0..c {
            let mut edges = vec![m.lower[ch]];
            if let Some(u) = &m.upper {
                edges.push(u[ch]);
            }
            for (k, e) in edges.into_iter().enumerate() {
                if e.is_finite() {
                    x[ch * n + 3 * k] = e;
                    x[ch * n + 3 * k + 1] = e.next_down();
                    x[ch * n + 3 * k + 2] = e.next_up();
                }
            }
        }
        let partial = Tensor::from_vec(&[c, 1, n], x).unwrap();
        let a = cgnet::gating::merged_gate(&partial, &gate).unwrap();
        let b = cgnet::gating::normalized_gate(&partial, &gate).unwrap();
        bad += a.data().iter().zip(b.data()).filter(|(p, q)| p != q).count();
    }
    bad
}

/// For `g` groups over `g * per` channels: how often each input channel is
/// base input and conditional input, recounted from the weight split of a
/// real block (base taps are the nonzero entries of the base kernel).
pub fn grouping_counts(g: usize, per: usize) -> (Vec<usize>, Vec<usize>) {
    let c = g * per;
    let cfg = CgLayerConfig::new(ConvSpec::new(c, c, 1), g, Activation::Relu);
    let mut b = CgBlock::<f64>::new(cfg, &mut rng(g as u64)).unwrap();
    b.weight.value = Tensor::ones(&[c, c, 1, 1]);
    let wb = cgnet::gating::base_weights(&b.weight.value, g);
    let cog = c / g;
    let mut base = vec![0usize; c];
    let mut cond = vec![0usize; c];
    for grp in 0..g {
        // first output channel of the group; the base kernel is (c_out, c/g, 1, 1)
        let o = grp * cog;
        let base_in: Vec<usize> = cgnet::gating::base_channels(c, g, grp).collect();
        for (j, &ch) in base_in.iter().enumerate() {
            assert_eq!(wb.data()[o * per + j], 1.0);
            base[ch] += 1;
        }
        for ch in cgnet::gating::conditional_channels(c, g, grp) {
            assert!(!base_in.contains(&ch));
            cond[ch] += 1;
        }
    }
    (base, cond)
}
