//! SGD training loop with sparsity losses, distillation and per-epoch metrics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::block::CombineMode;
use super::loss::{apply_target_loss, flop_loss, kd_loss, FlopTerm};
use crate::analysis::{count_flops, CostReport};
use crate::data::Dataset;
use crate::error::{config_err, CgError, Result};
use crate::model::Model;
use crate::nn::{argmax_rows, cross_entropy};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsityMode {
    /// `lambda * sum (T - delta)^2`.
    #[default]
    TargetThreshold,
    /// Squared computation-cost term over the surrogate maps.
    ComputationCost,
    None,
}

fn default_kappa() -> f64 {
    1.0
}

fn default_lambda_kd() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_lambda_kd")]
    pub lambda_kd: f64,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            kappa: default_kappa(),
            lambda_kd: default_lambda_kd(),
        }
    }
}

fn default_lambda() -> f64 {
    1e-4
}

fn default_warmup() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default)]
    pub sparsity: SparsityMode,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Overrides every layer's own target threshold when set.
    #[serde(default)]
    pub target: Option<f64>,
    /// Fraction of all steps over which `lambda` ramps up linearly from 0.
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default)]
    pub kd: KdConfig,
    #[serde(default)]
    pub combine: CombineMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            sparsity: SparsityMode::default(),
            lambda: default_lambda(),
            target: None,
            warmup_fraction: default_warmup(),
            kd: KdConfig::default(),
            combine: CombineMode::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(config_err(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(config_err("warmup_fraction must lie in [0, 1]"));
        }
        if !(self.kd.kappa > 0.0) || !(0.0..=1.0).contains(&self.kd.lambda_kd) {
            return Err(config_err("kd needs kappa > 0 and lambda_kd in [0, 1]"));
        }
        Ok(())
    }
}

fn default_momentum() -> f64 {
    0.9
}

fn default_lr_gamma() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Epochs (0-based) at whose start the learning rate is multiplied by `lr_gamma`.
    #[serde(default)]
    pub lr_milestones: Vec<usize>,
    #[serde(default = "default_lr_gamma")]
    pub lr_gamma: f64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err("epochs and batch_size must be positive"));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(config_err("need lr > 0, momentum in [0, 1) and weight_decay >= 0"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = self.lr_milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.lr_gamma.powi(k as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub loss: LossConfig,
    pub schedule: Schedule,
    /// Train with every gate held open (the dense-equivalent baseline).
    #[serde(default)]
    pub gates_open: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub mean_delta: f64,
    pub pruning_ratio: f64,
    pub flop_reduction: f64,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub accuracy: f64,
    pub cost: CostReport,
}

/// Accuracy and cost of a frozen model on a dataset.
pub fn evaluate<S: Scalar>(model: &Model<S>, data: &Dataset<S>) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(config_err("evaluation set is empty"));
    }
    let traces = model.infer_batch(&data.samples(), false)?;
    let correct = traces
        .iter()
        .zip(&data.labels)
        .filter(|(t, &l)| argmax_rows(&t.logits.clone().reshape(&[1, t.logits.len()]).expect("rank 2"))[0] == l)
        .count();
    Ok(Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        cost: count_flops(&model.geometries(), &traces)?,
    })
}

/// Teacher logits for a batch, from a frozen model.
fn teacher_logits<S: Scalar>(teacher: &Model<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    let nb = x.dim(0);
    let samples: Vec<Tensor<S>> = (0..nb).map(|i| x.sample(i)).collect();
    let traces = teacher.infer_batch(&samples, false)?;
    let rows: Vec<Tensor<S>> = traces.into_iter().map(|t| t.logits).collect();
    Tensor::stack(&rows)
}

/// Trains `model` in place and returns one metrics row per epoch. Gate
/// statistics are frozen after every epoch for evaluation, so the returned
/// model is ready for inference.
pub fn train_network<S: Scalar>(
    model: &mut Model<S>,
    train: &Dataset<S>,
    val: &Dataset<S>,
    cfg: &TrainConfig,
    teacher: Option<&Model<S>>,
    seed: u64,
) -> Result<Vec<EpochMetrics>> {
    cfg.loss.validate()?;
    cfg.schedule.validate()?;
    if train.is_empty() {
        return Err(config_err("training set is empty"));
    }
    if cfg.loss.kd.enabled && teacher.is_none() {
        return Err(config_err("distillation enabled without a teacher"));
    }
    if cfg.gates_open {
        model.force_gates(true);
    }
    let sched = &cfg.schedule;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps_per_epoch = train.len().div_ceil(sched.batch_size);
    let total_steps = steps_per_epoch * sched.epochs;
    let warmup_steps = (cfg.loss.warmup_fraction * total_steps as f64).ceil() as usize;
    let geos = model.geometries();
    let gated_geos: Vec<_> = geos.iter().filter(|g| g.gated).cloned().collect();
    let mut metrics = Vec::with_capacity(sched.epochs);
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..sched.epochs {
        let lr = S::of(sched.lr_at(epoch));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(sched.batch_size).enumerate() {
            let (x, labels) = train.batch(idx);
            let warm = if warmup_steps == 0 {
                1.0
            } else {
                ((step + 1) as f64 / warmup_steps as f64).min(1.0)
            };
            let lambda = cfg.loss.lambda * warm;
            model.zero_grad();
            let logits = model.forward_train(&x, cfg.loss.combine)?;
            let (task, dlogits) = match (cfg.loss.kd.enabled, teacher) {
                (true, Some(t)) => {
                    let tl = teacher_logits(t, &x)?;
                    kd_loss(&logits, &tl, &labels, cfg.loss.kd.kappa, cfg.loss.kd.lambda_kd)?
                }
                _ => cross_entropy(&logits, &labels)?,
            };
            let mut loss = task.as_f64();

            let mut extra = Vec::new();
            if cfg.loss.sparsity == SparsityMode::ComputationCost && !cfg.gates_open && lambda > 0.0 {
                let blocks = model.gated();
                let terms: Vec<FlopTerm<'_, S>> = blocks
                    .iter()
                    .zip(&gated_geos)
                    .map(|(g, geo)| {
                        let ctx = g.train_context().ok_or_else(|| CgError::MissingContext(geo.name.clone()))?;
                        Ok(FlopTerm {
                            s: &ctx.s,
                            scale: geo.base_patch_len() as f64 * geo.positions() as f64 * geo.out_channels as f64,
                        })
                    })
                    .collect::<Result<_>>()?;
                let (l, grads) = flop_loss(&terms, lambda)?;
                loss += l;
                extra = grads.into_iter().map(Some).collect();
            }
            model.backward(&dlogits, &extra)?;
            if cfg.loss.sparsity == SparsityMode::TargetThreshold && !cfg.gates_open && lambda > 0.0 {
                for g in model.gated_mut() {
                    let t = cfg.loss.target.unwrap_or(g.cfg.target_threshold);
                    loss += apply_target_loss(&mut g.gate.thresholds, t, lambda);
                }
            }
            let grads_finite = model
                .params_mut()
                .iter()
                .all(|p| p.grad.data().iter().all(|v| v.is_finite()));
            if !loss.is_finite() || !grads_finite {
                return Err(CgError::Divergence { epoch, step: b, loss });
            }
            model.step(lr, S::of(sched.momentum), S::of(sched.weight_decay));
            loss_sum += loss * idx.len() as f64;
            step += 1;
        }
        model.freeze();
        let ev = evaluate(model, val)?;
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_acc: ev.accuracy,
            mean_delta: model.mean_delta(),
            pruning_ratio: ev.cost.pruning_ratio,
            flop_reduction: ev.cost.flop_reduction,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} acc {:.4} mean delta {:.4} pruning {:.4} flop reduction {:.3}",
            m.train_loss,
            m.val_acc,
            m.mean_delta,
            m.pruning_ratio,
            m.flop_reduction
        );
        metrics.push(m);
    }
    Ok(metrics)
}

/// CSV with columns `epoch,train_loss,val_acc,mean_delta,pruning_ratio,flop_reduction`.
pub fn write_metrics_csv<W: std::io::Write>(metrics: &[EpochMetrics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for m in metrics {
        w.serialize(m)?;
    }
    w.flush()?;
    Ok(())
}
