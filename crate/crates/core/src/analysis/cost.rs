//! FLOP and weight-access accounting from decision maps.
//!
//! FLOPs are counted as MACs, padded taps included. Gate comparisons are
//! reported separately and excluded from the FLOP reduction.

use serde::Serialize;

use crate::error::{CgError, Result};
use crate::gating::DecisionMap;
use crate::model::{InferenceTrace, LayerGeometry};

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub gated: bool,
    /// Totals over all evaluated samples.
    pub dense_flops: u64,
    pub base_flops: u64,
    pub conditional_flops_executed: u64,
    pub conditional_flops_total: u64,
    pub gate_comparisons: u64,
    pub weight_values_accessed: u64,
    pub weight_values_total: u64,
    /// Fraction of output activations whose conditional path was skipped.
    pub pruning_ratio: f64,
}

impl LayerCost {
    pub fn executed_flops(&self) -> u64 {
        self.base_flops + self.conditional_flops_executed
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CostReport {
    pub samples: usize,
    pub layers: Vec<LayerCost>,
    pub dense_flops: u64,
    pub executed_flops: u64,
    pub gate_comparisons: u64,
    pub weight_values_accessed: u64,
    pub weight_values_total: u64,
    /// `dense / executed` over all MAC layers.
    pub flop_reduction: f64,
    /// `dense / (executed + comparisons)`.
    pub flop_reduction_with_overhead: f64,
    /// Dense weight values divided by the mean per-sample weight accesses.
    pub weight_access_reduction: f64,
    /// Pruning ratio over all gated activations.
    pub pruning_ratio: f64,
}

/// Comparisons a gated layer performs for one sample.
pub fn gate_comparisons(geo: &LayerGeometry, dm: &DecisionMap) -> u64 {
    let per = if geo.two_sided { 2 } else { 1 };
    let mask = if geo.channel_gate { dm.channels } else { 0 };
    (per * dm.d.len() + mask) as u64
}

/// Analytic cost of one layer on one sample.
pub fn layer_cost(geo: &LayerGeometry, dm: Option<&DecisionMap>) -> Result<LayerCost> {
    let mut c = LayerCost {
        name: geo.name.clone(),
        gated: geo.gated,
        dense_flops: geo.dense_macs(),
        conditional_flops_total: geo.conditional_macs_total(),
        weight_values_total: geo.weight_values(),
        ..Default::default()
    };
    if !geo.gated {
        c.base_flops = geo.dense_macs();
        c.conditional_flops_total = 0;
        c.weight_values_accessed = geo.weight_values();
        return Ok(c);
    }
    let dm = dm.ok_or_else(|| CgError::State(format!("missing decision map for gated layer {}", geo.name)))?;
    if dm.channels != geo.out_channels || (dm.height, dm.width) != geo.out_hw {
        return Err(CgError::Shape {
            expected: vec![geo.out_channels, geo.out_hw.0, geo.out_hw.1],
            actual: vec![dm.channels, dm.height, dm.width],
        });
    }
    let cond = geo.conditional_patch_len() as u64;
    c.base_flops = geo.base_macs();
    c.conditional_flops_executed = cond * dm.total_effective() as u64;
    let live_channels = dm.channel_mask.iter().filter(|&&m| m).count() as u64;
    c.weight_values_accessed = geo.base_weight_values() + cond * live_channels;
    c.gate_comparisons = gate_comparisons(geo, dm);
    c.pruning_ratio = crate::gating::pruning_ratio(dm);
    Ok(c)
}

/// Aggregates analytic costs over the traces of several samples.
pub fn count_flops<S>(geos: &[LayerGeometry], traces: &[InferenceTrace<S>]) -> Result<CostReport> {
    let mut layers: Vec<LayerCost> = geos
        .iter()
        .map(|g| LayerCost {
            name: g.name.clone(),
            gated: g.gated,
            ..Default::default()
        })
        .collect();
    let mut pruned = 0usize;
    let mut gated_acts = 0usize;
    for t in traces {
        if t.layers.len() != geos.len() {
            return Err(CgError::Shape {
                expected: vec![geos.len()],
                actual: vec![t.layers.len()],
            });
        }
        for (i, (geo, lt)) in geos.iter().zip(&t.layers).enumerate() {
            let c = layer_cost(geo, lt.decisions.as_ref())?;
            let acc = &mut layers[i];
            acc.dense_flops += c.dense_flops;
            acc.base_flops += c.base_flops;
            acc.conditional_flops_executed += c.conditional_flops_executed;
            acc.conditional_flops_total += c.conditional_flops_total;
            acc.weight_values_accessed += c.weight_values_accessed;
            acc.weight_values_total += c.weight_values_total;
            if let (true, Some(dm)) = (geo.gated, lt.decisions.as_ref()) {
                acc.gate_comparisons += gate_comparisons(geo, dm);
                pruned += dm.d.len() - dm.total_effective();
                gated_acts += dm.d.len();
            }
        }
    }
    for (acc, geo) in layers.iter_mut().zip(geos) {
        if geo.gated && acc.conditional_flops_total > 0 {
            let acts = acc.conditional_flops_total / geo.conditional_patch_len().max(1) as u64;
            let live = acc.conditional_flops_executed / geo.conditional_patch_len().max(1) as u64;
            acc.pruning_ratio = 1.0 - live as f64 / acts as f64;
        }
    }
    Ok(summarize(layers, traces.len(), pruned, gated_acts))
}

fn summarize(layers: Vec<LayerCost>, samples: usize, pruned: usize, gated_acts: usize) -> CostReport {
    let dense: u64 = layers.iter().map(|l| l.dense_flops).sum();
    let executed: u64 = layers.iter().map(|l| l.executed_flops()).sum();
    let comparisons: u64 = layers.iter().map(|l| l.gate_comparisons).sum();
    let accessed: u64 = layers.iter().map(|l| l.weight_values_accessed).sum();
    let total_w: u64 = layers.iter().map(|l| l.weight_values_total).sum();
    let ratio = |a: u64, b: u64| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    CostReport {
        samples,
        dense_flops: dense,
        executed_flops: executed,
        gate_comparisons: comparisons,
        weight_values_accessed: accessed,
        weight_values_total: total_w,
        flop_reduction: ratio(dense, executed),
        flop_reduction_with_overhead: ratio(dense, executed + comparisons),
        weight_access_reduction: ratio(total_w, accessed),
        pruning_ratio: if gated_acts == 0 { 0.0 } else { pruned as f64 / gated_acts as f64 },
        layers,
    }
}

/// Weight accesses per sample, recounted by visiting every (sample, layer,
/// output channel): base weights always, conditional weights iff the
/// channel survives the channel-wise gate.
pub fn count_weight_accesses<S>(geos: &[LayerGeometry], traces: &[InferenceTrace<S>]) -> Result<Vec<u64>> {
    traces
        .iter()
        .map(|t| {
            let mut total = 0u64;
            for (geo, lt) in geos.iter().zip(&t.layers) {
                let kk = (geo.kernel * geo.kernel) as u64;
                let per_channel = geo.in_channels as u64 * kk;
                let base = (geo.in_channels / geo.groups) as u64 * kk;
                for o in 0..geo.out_channels {
                    total += match (&lt.decisions, geo.gated) {
                        (_, false) => per_channel,
                        (Some(dm), true) => base + if dm.channel_mask[o] { per_channel - base } else { 0 },
                        (None, true) => {
                            return Err(CgError::State(format!("missing decision map for {}", geo.name)));
                        }
                    };
                }
            }
            Ok(total)
        })
        .collect()
}
