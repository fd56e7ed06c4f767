//! Finite-difference checks of every backward pass, shared by the test targets.

use cgnet::gating::{CgBlock, GateKind};
use cgnet::model::{LayerSpec, Model, ModelSpec, UnitSpec};
use cgnet::nn::{
    activation, activation_backward, batchnorm_backward, batchnorm_forward, conv2d, conv2d_backward,
    cross_entropy, global_avg_pool, global_avg_pool_backward, linear_backward, linear_forward, maxpool_backward,
    maxpool_forward, Activation, ConvSpec, RunningStats,
};
use cgnet::training::{apply_target_loss, flop_loss, kd_loss, target_loss, CombineMode, FlopTerm};
use cgnet::Tensor;
use super::*;
use rand::Rng;

pub fn conv2d_gradients() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let g = [1, 2][r.random_range(0..2)];
        let spec = ConvSpec::new(2 * g, 2 * g, 3)
            .with_padding(r.random_range(0..2))
            .with_stride(r.random_range(1..3))
            .with_groups(g);
        let x = Tensor::<f64>::randn(&[2, spec.in_channels, 5, 5], 1.0, &mut r);
        let w = Tensor::randn(&spec.weight_shape(), 0.5, &mut r);
        let y = conv2d(&x, &w, &spec).unwrap();
        let probe_t = Tensor::randn(y.shape(), 1.0, &mut r);
        let (dx, dw) = conv2d_backward(&x, &w, &probe_t, &spec).unwrap();
        let nx = numeric_grad(&x, |t| t.data_mut(), |t| probe(&conv2d(t, &w, &spec).unwrap(), &probe_t));
        let nw = numeric_grad(&w, |t| t.data_mut(), |t| probe(&conv2d(&x, t, &spec).unwrap(), &probe_t));
        assert_grad("conv dx", dx.data(), &nx);
        assert_grad("conv dw", dw.data(), &nw);
    }
}

pub fn batchnorm_gradients() {
    for seed in 0..SEEDS {
        let mut r = rng(100 + seed);
        let c = 3;
        let x = Tensor::<f64>::randn(&[3, c, 2, 2], 2.0, &mut r);
        let gamma: Vec<f64> = (0..c).map(|_| r.random_range(0.5..2.0)).collect();
        let beta: Vec<f64> = (0..c).map(|_| r.random_range(-1.0..1.0)).collect();
        let probe_t = Tensor::randn(x.shape(), 1.0, &mut r);
        for affine in [true, false] {
            let fwd = |x: &Tensor<f64>, g: &[f64], b: &[f64]| {
                let mut st = RunningStats::new(c);
                let aff = affine.then_some((g, b));
                batchnorm_forward(x, &mut st, aff, true).unwrap()
            };
            let (_, ctx) = fwd(&x, &gamma, &beta);
            let (dx, dg, db) =
                batchnorm_backward(&probe_t, ctx.as_ref().unwrap(), affine.then_some(&gamma[..])).unwrap();
            let nx = numeric_grad(&x, |t| t.data_mut(), |t| probe(&fwd(t, &gamma, &beta).0, &probe_t));
            assert_grad("bn dx", dx.data(), &nx);
            if affine {
                let ng = numeric_grad(&gamma, |v| v.as_mut_slice(), |v| probe(&fwd(&x, v, &beta).0, &probe_t));
                let nb = numeric_grad(&beta, |v| v.as_mut_slice(), |v| probe(&fwd(&x, &gamma, v).0, &probe_t));
                assert_grad("bn dgamma", &dg, &ng);
                assert_grad("bn dbeta", &db, &nb);
            }
        }
    }
}

pub fn activation_gradients() {
    for seed in 0..SEEDS {
        let mut r = rng(200 + seed);
        // Keep ReLU inputs away from the kink.
        let x = Tensor::<f64>::from_fn(&[24], |_| {
            let v: f64 = r.random_range(0.05..2.0);
            if r.random_bool(0.5) {
                v
            } else {
                -v
            }
        });
        let probe_t = Tensor::randn(&[24], 1.0, &mut r);
        for kind in [Activation::Identity, Activation::Relu, Activation::Tanh, Activation::Sigmoid] {
            let dx = activation_backward(&x, &probe_t, kind);
            let n = numeric_grad(&x, |t| t.data_mut(), |t| probe(&activation(t, kind), &probe_t));
            assert_grad(&format!("{kind:?}"), dx.data(), &n);
        }
    }
}

pub fn linear_and_pooling_gradients() {
    for seed in 0..SEEDS {
        let mut r = rng(300 + seed);
        let x = Tensor::<f64>::randn(&[3, 5], 1.0, &mut r);
        let w = Tensor::randn(&[4, 5], 1.0, &mut r);
        let b: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let probe_t = Tensor::randn(&[3, 4], 1.0, &mut r);
        let (dx, dw, db) = linear_backward(&x, &w, &probe_t).unwrap();
        let nx = numeric_grad(&x, |t| t.data_mut(), |t| probe(&linear_forward(t, &w, &b).unwrap(), &probe_t));
        let nw = numeric_grad(&w, |t| t.data_mut(), |t| probe(&linear_forward(&x, t, &b).unwrap(), &probe_t));
        let nb = numeric_grad(&b, |v| v.as_mut_slice(), |v| probe(&linear_forward(&x, &w, v).unwrap(), &probe_t));
        assert_grad("linear dx", dx.data(), &nx);
        assert_grad("linear dw", dw.data(), &nw);
        assert_grad("linear db", &db, &nb);

        // Distinct values spaced well beyond the step, so no window has a near tie.
        let mut vals: Vec<f64> = (0..64).map(|i| i as f64 * 0.05).collect();
        rand::seq::SliceRandom::shuffle(&mut vals[..], &mut r);
        let m = Tensor::<f64>::from_vec(&[2, 2, 4, 4], vals).unwrap();
        let (y, arg) = maxpool_forward(&m, 2).unwrap();
        let pm = Tensor::randn(y.shape(), 1.0, &mut r);
        let dm = maxpool_backward(&pm, &arg, m.shape()).unwrap();
        let nm = numeric_grad(&m, |t| t.data_mut(), |t| probe(&maxpool_forward(t, 2).unwrap().0, &pm));
        assert_grad("maxpool", dm.data(), &nm);

        let y = global_avg_pool(&m).unwrap();
        let pg = Tensor::randn(y.shape(), 1.0, &mut r);
        let dg = global_avg_pool_backward(&pg, m.shape()).unwrap();
        let ng = numeric_grad(&m, |t| t.data_mut(), |t| probe(&global_avg_pool(t).unwrap(), &pg));
        assert_grad("global pool", dg.data(), &ng);
    }
}

pub fn cross_entropy_gradients() {
    for seed in 0..SEEDS {
        let mut r = rng(400 + seed);
        let logits = Tensor::<f64>::randn(&[4, 10], 2.0, &mut r);
        let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..10)).collect();
        let (_, g) = cross_entropy(&logits, &labels).unwrap();
        let n = numeric_grad(&logits, |t| t.data_mut(), |t| cross_entropy(t, &labels).unwrap().0);
        assert_grad("cross entropy", g.data(), &n);
    }
}

pub fn kd_loss_gradients() {
    for seed in 0..SEEDS {
        let mut r = rng(500 + seed);
        let student = Tensor::<f64>::randn(&[3, 10], 2.0, &mut r);
        let teacher = Tensor::randn(&[3, 10], 2.0, &mut r);
        let labels: Vec<usize> = (0..3).map(|_| r.random_range(0..10)).collect();
        for (kappa, lam) in [(1.0, 0.5), (r.random_range(0.5..4.0), r.random_range(0.0..1.0))] {
            let (_, g) = kd_loss(&student, &teacher, &labels, kappa, lam).unwrap();
            let n = numeric_grad(&student, |t| t.data_mut(), |t| {
                kd_loss(t, &teacher, &labels, kappa, lam).unwrap().0
            });
            assert_grad("kd", g.data(), &n);
        }
    }
}

pub fn target_loss_gradients() {
    for seed in 0..SEEDS {
        let mut r = rng(600 + seed);
        let delta: Vec<f64> = (0..6).map(|_| r.random_range(-2.0..2.0)).collect();
        let t = r.random_range(-1.0..2.0);
        let lam = r.random_range(0.01..2.0);
        let (_, g) = target_loss(&delta, t, lam);
        let n = numeric_grad(&delta, |v| v.as_mut_slice(), |v| target_loss(v, t, lam).0);
        assert_grad("target loss", &g, &n);

        // Two-sided windows through the gate parameters.
        let (mut b, _) = gated_block(seed, Activation::Tanh, GateKind::TwoSided, false);
        let before = b.gate.thresholds.clone();
        let mut analytic = Vec::new();
        apply_target_loss(&mut b.gate.thresholds, t, lam);
        for p in b.gate.thresholds.params() {
            analytic.extend_from_slice(p.grad.data());
        }
        let loss = |th: &cgnet::gating::Thresholds<f64>| {
            let mut th = th.clone();
            apply_target_loss(&mut th, t, lam)
        };
        let mut numeric = Vec::new();
        for k in 0..2 {
            numeric.extend(numeric_grad(&before, |th| th.params_mut().remove(k).value.data_mut(), loss));
        }
        assert_grad("two-sided target loss", &analytic, &numeric);
    }
}

fn block_loss(b: &CgBlock<f64>, x: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    let mut b = b.clone();
    probe(&b.forward_train(x, CombineMode::Smooth).unwrap(), r)
}

fn threshold_values(b: &CgBlock<f64>) -> Vec<f64> {
    b.gate.thresholds.params().iter().flat_map(|p| p.value.data().to_vec()).collect()
}

fn threshold_grads(b: &CgBlock<f64>) -> Vec<f64> {
    b.gate.thresholds.params().iter().flat_map(|p| p.grad.data().to_vec()).collect()
}

fn numeric_threshold_grad(b: &CgBlock<f64>, loss: impl Fn(&CgBlock<f64>) -> f64) -> Vec<f64> {
    let k = b.gate.thresholds.params().len();
    (0..k)
        .flat_map(|j| numeric_grad(b, |b| b.gate.thresholds.params_mut().remove(j).value.data_mut(), &loss))
        .collect()
}

pub fn gated_block_surrogate_gradients() {
    let cases = [
        (Activation::Tanh, GateKind::SingleSided, false),
        (Activation::Sigmoid, GateKind::SingleSided, true),
        (Activation::Tanh, GateKind::TwoSided, false),
        (Activation::Identity, GateKind::TwoSided, true),
    ];
    for seed in 0..SEEDS {
        for &(act, kind, shuffle) in &cases {
            let (mut b, x) = gated_block(700 + seed, act, kind, shuffle);
            let mut r = rng(seed);
            let y = b.forward_train(&x, CombineMode::Smooth).unwrap();
            let pr = Tensor::randn(y.shape(), 1.0, &mut r);
            let base = b.clone();
            let dx = b.backward(&pr, None).unwrap();
            let what = format!("{act:?}/{kind:?}/shuffle={shuffle} seed {seed}");

            let nx = numeric_grad(&x, |t| t.data_mut(), |t| block_loss(&base, t, &pr));
            assert_grad(&format!("block dx {what}"), dx.data(), &nx);
            let nw = numeric_grad(&base, |b| b.weight.value.data_mut(), |b| block_loss(b, &x, &pr));
            assert_grad(&format!("block dW {what}"), b.weight.grad.data(), &nw);
            let ng = numeric_grad(&base, |b| b.gamma.value.data_mut(), |b| block_loss(b, &x, &pr));
            assert_grad(&format!("block dgamma {what}"), b.gamma.grad.data(), &ng);
            let nb = numeric_grad(&base, |b| b.beta.value.data_mut(), |b| block_loss(b, &x, &pr));
            assert_grad(&format!("block dbeta {what}"), b.beta.grad.data(), &nb);
            let nd = numeric_threshold_grad(&base, |b| block_loss(b, &x, &pr));
            assert_grad(&format!("block dDelta {what}"), &threshold_grads(&b), &nd);
            assert_eq!(threshold_values(&b), threshold_values(&base));
        }
    }
}

pub fn flop_loss_gradients_through_surrogate() {
    for seed in 0..SEEDS {
        let (mut b, x) = gated_block(800 + seed, Activation::Tanh, GateKind::SingleSided, false);
        let scale = 1e-3 * (1 + seed) as f64;
        let lam = 0.5;
        let loss = |b: &CgBlock<f64>| {
            let mut b = b.clone();
            b.forward_train(&x, CombineMode::Smooth).unwrap();
            let s = &b.train_context().unwrap().s;
            flop_loss(&[FlopTerm { s, scale }], lam).unwrap().0
        };
        let base = b.clone();
        let y = b.forward_train(&x, CombineMode::Smooth).unwrap();
        let (_, grads) = {
            let s = &b.train_context().unwrap().s;
            flop_loss(&[FlopTerm { s, scale }], lam).unwrap()
        };
        b.backward(&Tensor::zeros(y.shape()), Some(&grads[0])).unwrap();
        let nd = numeric_threshold_grad(&base, loss);
        assert_grad("flop loss dDelta", &threshold_grads(&b), &nd);
        let nw = numeric_grad(&base, |b| b.weight.value.data_mut(), loss);
        assert_grad("flop loss dW", b.weight.grad.data(), &nw);
    }
}

pub fn flop_loss_gradient_wrt_surrogate_map() {
    for seed in 0..SEEDS {
        let mut r = rng(900 + seed);
        let s1 = Tensor::<f64>::rand_uniform(&[2, 2, 2, 2], 0.0, 1.0, &mut r);
        let s2 = Tensor::<f64>::rand_uniform(&[2, 3, 1, 2], 0.0, 1.0, &mut r);
        let (a, b) = (r.random_range(0.1..2.0), r.random_range(0.1..2.0));
        let f = |s1: &Tensor<f64>, s2: &Tensor<f64>| {
            flop_loss(&[FlopTerm { s: s1, scale: a }, FlopTerm { s: s2, scale: b }], 0.3).unwrap().0
        };
        let (_, g) = flop_loss(&[FlopTerm { s: &s1, scale: a }, FlopTerm { s: &s2, scale: b }], 0.3).unwrap();
        assert_grad("flop ds1", g[0].data(), &numeric_grad(&s1, |t| t.data_mut(), |t| f(t, &s2)));
        assert_grad("flop ds2", g[1].data(), &numeric_grad(&s2, |t| t.data_mut(), |t| f(&s1, t)));
    }
}

fn residual_model(seed: u64) -> Model<f64> {
    let gate = |ci, co, act, stride| {
        let mut g = cgnet::gating::CgLayerConfig::new(
            ConvSpec::new(ci, co, 3).with_padding(1).with_stride(stride),
            2,
            act,
        );
        g.shuffle = stride == 2;
        g.gate_kind = GateKind::SingleSided;
        g
    };
    let spec = ModelSpec {
        input: [2, 6, 6],
        layers: vec![
            LayerSpec::Gated {
                gate: gate(2, 4, Activation::Tanh, 1),
            },
            LayerSpec::Residual {
                a: UnitSpec::Gated {
                    gate: gate(4, 4, Activation::Sigmoid, 2),
                },
                b: UnitSpec::Gated {
                    gate: gate(4, 4, Activation::Identity, 1),
                },
            },
            LayerSpec::Conv {
                conv: ConvSpec::new(4, 4, 1),
                activation: Activation::Tanh,
            },
            LayerSpec::GlobalAvgPool,
            LayerSpec::Linear {
                in_features: 4,
                out_features: 3,
            },
        ],
    };
    Model::build(&spec, &mut rng(seed)).unwrap()
}

pub fn whole_model_gradients() {
    // The residual join applies ReLU; inputs are scaled so that sums stay
    // clear of the kink for these seeds.
    for seed in 0..SEEDS {
        let mut m = residual_model(seed);
        let mut r = rng(1000 + seed);
        let x = Tensor::<f64>::randn(&[2, 2, 6, 6], 1.0, &mut r);
        let labels = vec![r.random_range(0..3), r.random_range(0..3)];
        let loss = |m: &Model<f64>| {
            let mut m = m.clone();
            let logits = m.forward_train(&x, CombineMode::Smooth).unwrap();
            cross_entropy(&logits, &labels).unwrap().0
        };
        let base = m.clone();
        m.zero_grad();
        let logits = m.forward_train(&x, CombineMode::Smooth).unwrap();
        let (_, dl) = cross_entropy(&logits, &labels).unwrap();
        m.backward(&dl, &[]).unwrap();
        let n_params = m.params_mut().len();
        let mut worst = 0.0f64;
        for k in 0..n_params {
            let analytic = m.params_mut()[k].grad.data().to_vec();
            let numeric = numeric_grad(&base, |m| m.params_mut().remove(k).value.data_mut(), loss);
            let e = rel_err(&analytic, &numeric);
            worst = worst.max(e);
            assert!(e < TOL, "param {k} seed {seed}: relative error {e:e}");
        }
        assert!(worst < TOL);
    }
}
