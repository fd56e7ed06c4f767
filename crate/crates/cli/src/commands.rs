//! The `train`, `eval`, `analyze` and `perf` subcommands.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use cgnet::analysis::{
    aggregate_intensity, count_weight_accesses, intensity_map, partial_final_correlation, write_cost_csv,
    write_json_summary, CorrelationReport, CostReport,
};
use cgnet::checkpoint;
use cgnet::data::Dataset;
use cgnet::model::Model;
use cgnet::perf::{model_network_speedup, write_perf_csv, ArrayConfig, SpeedupReport};
use cgnet::training::{evaluate, train_network, write_metrics_csv, EpochMetrics};
use cgnet::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

/// Flags shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub out: Option<PathBuf>,
}

impl RunOptions {
    pub fn seed(&self, cfg: &ExperimentConfig) -> u64 {
        self.seed.unwrap_or(cfg.seed)
    }

    /// `--out`, else the config's `output_dir`, else `runs/`.
    pub fn out_dir(&self, cfg: &ExperimentConfig) -> Result<PathBuf> {
        let dir = self
            .out
            .clone()
            .or_else(|| cfg.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("runs"));
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        Ok(dir)
    }
}

/// Gate overrides applied to a loaded checkpoint.
#[derive(Clone, Debug, Default)]
pub struct GateOptions {
    /// Sets every threshold to this value.
    pub delta_override: Option<f64>,
    /// Shifts every threshold by the offset that reaches this FLOP reduction.
    pub target_flop_reduction: Option<f64>,
    /// Replaces gated layers by their all-open dense equivalent.
    pub dense: bool,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?))
}

/// Caps worker threads: one when deterministic, else `CG_THREADS` if set.
/// Reductions are ordered either way; the serial mode removes any doubt.
pub fn configure_threads(deterministic: bool) -> Result<()> {
    let n = if deterministic {
        Some(1)
    } else {
        match std::env::var("CG_THREADS") {
            Ok(v) => Some(
                v.parse::<usize>()
                    .ok()
                    .filter(|&n| n > 0)
                    .ok_or_else(|| CliError::Usage(format!("CG_THREADS must be a positive integer, got {v:?}")))?,
            ),
            Err(_) => None,
        }
    };
    if let Some(n) = n {
        // A second initialization in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Training and validation sets, cast to the working precision.
pub fn load_datasets<S: Scalar>(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset<S>, Dataset<S>)> {
    let all = cfg.dataset.load()?;
    let (train, val) = match &cfg.validation {
        Some(v) => (all, v.load()?),
        None => all.split(cfg.val_fraction, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed)),
    };
    if train.sample_shape != cfg.model.input {
        return Err(CliError::Usage(format!(
            "dataset samples have shape {:?}, model expects {:?}",
            train.sample_shape, cfg.model.input
        )));
    }
    Ok((train.cast(), val.cast()))
}

fn capped<S: Scalar>(data: &Dataset<S>, cap: Option<usize>) -> Vec<cgnet::Tensor<S>> {
    let n = cap.unwrap_or(data.len()).min(data.len());
    (0..n).map(|i| data.sample(i)).collect()
}

#[derive(Debug, Serialize)]
pub struct TrainOutcome {
    pub command: &'static str,
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub metrics: Vec<EpochMetrics>,
}

/// Trains from scratch; writes `checkpoint.cgn`, `metrics.csv` and `train.json`.
pub fn cmd_train<S: Scalar>(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<TrainOutcome> {
    let seed = opts.seed(cfg);
    let out = opts.out_dir(cfg)?;
    let (train, val) = load_datasets::<S>(cfg, seed)?;
    let teacher = cfg
        .teacher
        .as_ref()
        .filter(|_| cfg.train.loss.kd.enabled)
        .map(|p| load_checkpoint::<S>(p))
        .transpose()?;
    let mut model = Model::<S>::build(&cfg.model, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let metrics = train_network(&mut model, &train, &val, &cfg.train, teacher.as_ref(), seed.wrapping_add(1))?;
    let ck = out.join("checkpoint.cgn");
    checkpoint::write_checkpoint(&model, create(&ck)?)?;
    write_metrics_csv(&metrics, create(&out.join("metrics.csv"))?)?;
    let outcome = TrainOutcome {
        command: "train",
        seed,
        checkpoint: ck,
        metrics,
    };
    write_json_summary(&outcome, create(&out.join("train.json"))?)?;
    Ok(outcome)
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Model<S>> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let parsed = checkpoint::parse::<S>(&bytes).map_err(|e| CliError::Data {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok(checkpoint::bind(parsed)?)
}

/// Smallest threshold offset (to 1e-4) whose FLOP reduction on `samples`
/// reaches `target`; the reduction grows with the offset.
pub fn calibrate_offset<S: Scalar>(model: &Model<S>, samples: &[cgnet::Tensor<S>], target: f64) -> Result<f64> {
    let reduction = |off: f64| -> Result<f64> {
        let mut m = model.clone();
        m.offset_deltas(off);
        m.freeze();
        let traces = m.infer_batch(samples, false)?;
        Ok(cgnet::analysis::count_flops(&m.geometries(), &traces)?.flop_reduction)
    };
    let (mut lo, mut hi) = (-8.0, 8.0);
    if reduction(hi)? < target {
        return Err(CliError::Usage(format!("FLOP reduction {target} is out of reach for this model")));
    }
    if reduction(lo)? >= target {
        return Ok(lo);
    }
    while hi - lo > 1e-4 {
        let mid = 0.5 * (lo + hi);
        if reduction(mid)? >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Loads a checkpoint and applies the gate overrides.
pub fn prepare_model<S: Scalar>(
    path: &Path,
    gates: &GateOptions,
    calibration: &[cgnet::Tensor<S>],
) -> Result<Model<S>> {
    let mut model = load_checkpoint::<S>(path)?;
    if let Some(v) = gates.delta_override {
        for g in model.gated_mut() {
            g.gate.set_delta(v);
        }
    }
    if let Some(r) = gates.target_flop_reduction {
        let off = calibrate_offset(&model, calibration, r)?;
        log::info!("threshold offset {off:.4} reaches FLOP reduction {r}");
        model.offset_deltas(off);
    }
    model.freeze();
    if gates.dense {
        model = model.to_dense()?;
    }
    Ok(model)
}

#[derive(Debug, Serialize)]
pub struct EvalOutcome {
    pub command: &'static str,
    pub samples: usize,
    pub accuracy: f64,
    pub cost: CostReport,
}

/// Accuracy and cost on the validation set; writes `cost.csv` and `eval.json`.
pub fn cmd_eval<S: Scalar>(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    gates: &GateOptions,
    opts: &RunOptions,
) -> Result<EvalOutcome> {
    let (_, val) = load_datasets::<S>(cfg, opts.seed(cfg))?;
    let model = prepare_model::<S>(checkpoint, gates, &capped(&val, cfg.analysis.max_samples))?;
    let out = opts.out_dir(cfg)?;
    let ev = evaluate(&model, &val)?;
    write_cost_csv(&ev.cost, create(&out.join("cost.csv"))?)?;
    let outcome = EvalOutcome {
        command: "eval",
        samples: val.len(),
        accuracy: ev.accuracy,
        cost: ev.cost,
    };
    write_json_summary(&outcome, create(&out.join("eval.json"))?)?;
    Ok(outcome)
}

#[derive(Debug, Serialize)]
pub struct TauPoint {
    pub tau_c: f64,
    pub accuracy: f64,
    pub weight_access_reduction: f64,
    pub flop_reduction: f64,
}

#[derive(Debug, Serialize)]
pub struct AnalyzeOutcome {
    pub command: &'static str,
    pub samples: usize,
    pub correlation: CorrelationReport,
    pub tau_sweep: Vec<TauPoint>,
    pub intensity_maps: Vec<PathBuf>,
}

/// Intensity maps (PGM), partial/final-sum correlation and the channel-gate
/// weight-access sweep.
pub fn cmd_analyze<S: Scalar>(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    gates: &GateOptions,
    opts: &RunOptions,
) -> Result<AnalyzeOutcome> {
    let (_, val) = load_datasets::<S>(cfg, opts.seed(cfg))?;
    let samples = capped(&val, cfg.analysis.max_samples);
    let model = prepare_model::<S>(checkpoint, gates, &samples)?;
    let out = opts.out_dir(cfg)?;
    let traces = model.infer_batch(&samples, true)?;

    let idir = out.join("intensity");
    std::fs::create_dir_all(&idir).map_err(|e| io_err(&idir, e))?;
    let [_, h, w] = model.input_shape();
    let mut written = Vec::new();
    for (s, t) in traces.iter().take(cfg.analysis.intensity_samples).enumerate() {
        let mut maps = Vec::new();
        for lt in &t.layers {
            if let Some(dm) = &lt.decisions {
                let m = intensity_map(dm);
                let p = idir.join(format!("sample{s}_{}.pgm", lt.name.replace('.', "_")));
                std::fs::write(&p, m.to_pgm()).map_err(|e| io_err(&p, e))?;
                written.push(p);
                maps.push(m);
            }
        }
        if !maps.is_empty() {
            let p = idir.join(format!("sample{s}_aggregate.pgm"));
            std::fs::write(&p, aggregate_intensity(&maps, h, w).to_pgm()).map_err(|e| io_err(&p, e))?;
            written.push(p);
        }
    }

    let correlation = partial_final_correlation(&model, &traces, &cfg.analysis.correlation_groups)?;
    let mut cw = csv::Writer::from_writer(create(&out.join("correlation.csv"))?);
    let mut header = vec!["layer".to_string()];
    header.extend(correlation.groups.iter().map(|g| format!("eta_1_{g}")));
    cw.write_record(&header).map_err(cgnet::CgError::from)?;
    for (li, name) in correlation.layers.iter().enumerate() {
        let mut row = vec![name.clone()];
        row.extend(correlation.r.iter().map(|r| r[li].map_or(String::new(), |v| format!("{v:.6}"))));
        cw.write_record(&row).map_err(cgnet::CgError::from)?;
    }
    let mut mean = vec!["mean".to_string()];
    mean.extend(correlation.mean.iter().map(|v| format!("{v:.6}")));
    cw.write_record(&mean).map_err(cgnet::CgError::from)?;
    cw.flush().map_err(|e| io_err(&out.join("correlation.csv"), e))?;

    let labels = &val.labels[..samples.len()];
    let mut tau_sweep = Vec::new();
    for &tau in &cfg.analysis.tau_c_sweep {
        let mut m = model.clone();
        m.set_tau_c(tau);
        let tr = m.infer_batch(&samples, false)?;
        let geos = m.geometries();
        let cost = cgnet::analysis::count_flops(&geos, &tr)?;
        let per_sample = count_weight_accesses(&geos, &tr)?;
        let mean_access = per_sample.iter().sum::<u64>() as f64 / per_sample.len().max(1) as f64;
        let total: u64 = geos.iter().map(|g| g.weight_values()).sum();
        let correct = tr
            .iter()
            .zip(labels)
            .filter(|(t, &l)| argmax(t.logits.data()) == l)
            .count();
        tau_sweep.push(TauPoint {
            tau_c: tau,
            accuracy: correct as f64 / samples.len().max(1) as f64,
            weight_access_reduction: total as f64 / mean_access,
            flop_reduction: cost.flop_reduction,
        });
    }
    let mut ww = csv::Writer::from_writer(create(&out.join("weight_access.csv"))?);
    for p in &tau_sweep {
        ww.serialize(p).map_err(cgnet::CgError::from)?;
    }
    ww.flush().map_err(|e| io_err(&out.join("weight_access.csv"), e))?;

    let outcome = AnalyzeOutcome {
        command: "analyze",
        samples: samples.len(),
        correlation,
        tau_sweep,
        intensity_maps: written,
    };
    write_json_summary(&outcome, create(&out.join("analyze.json"))?)?;
    Ok(outcome)
}

fn argmax<S: Scalar>(v: &[S]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Serialize)]
pub struct PerfOutcome {
    pub command: &'static str,
    pub samples: usize,
    pub array: ArrayConfig,
    pub speedup: f64,
    pub flop_reduction: f64,
    pub report: SpeedupReport,
}

/// Modeled systolic-array speedup; writes `perf.csv` and `perf.json`.
pub fn cmd_perf<S: Scalar>(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    gates: &GateOptions,
    array: &ArrayConfig,
    opts: &RunOptions,
) -> Result<PerfOutcome> {
    let (_, val) = load_datasets::<S>(cfg, opts.seed(cfg))?;
    let samples = capped(&val, cfg.analysis.max_samples);
    let model = prepare_model::<S>(checkpoint, gates, &samples)?;
    let out = opts.out_dir(cfg)?;
    let traces = model.infer_batch(&samples, false)?;
    let maps: Vec<Vec<_>> = traces
        .iter()
        .map(|t| t.layers.iter().map(|l| l.decisions.as_ref()).collect())
        .collect();
    let report = model_network_speedup(&model.geometries(), &maps, array)?;
    write_perf_csv(&report, create(&out.join("perf.csv"))?)?;
    let outcome = PerfOutcome {
        command: "perf",
        samples: samples.len(),
        array: *array,
        speedup: report.speedup,
        flop_reduction: report.flop_reduction,
        report,
    };
    write_json_summary(&outcome, create(&out.join("perf.json"))?)?;
    Ok(outcome)
}
