//! Analytical systolic-array cost model.
//!
//! A layer is the product `W (c_out x K) * X (K x N)` with `K = c_in k^2`
//! and `N = h' w'`. The array holds a `rows`-deep slice of `K` for one
//! input group at a time (a tile) and streams output vectors of `cols`
//! positions, one vector per cycle. Every tile pays a fill/drain latency.
//!
//! Dense: each tile streams `V = ceil(N / cols)` vectors for every output
//! channel. Gated: a tile over input group `g` streams every vector of the
//! base channels (output group `g`); conditional channels stream only the
//! vectors holding live activations, counted according to [`VectorLayout`].
//!
//! The compacting layouts fill vectors at the dense schedule's lane
//! occupancy `N / (cols V)`, so within a layer the modeled speedup never
//! exceeds the MAC reduction.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::gating::DecisionMap;
use crate::model::LayerGeometry;

/// How live conditional activations map onto array vectors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VectorLayout {
    /// Live activations of all conditional channels of a tile are compacted
    /// together: `ceil(sum(live) V / N)`.
    #[default]
    Packed,
    /// Live activations are compacted per channel: `sum(ceil(live_o V / N))`.
    PerChannel,
    /// No compaction: a `cols`-wide spatial chunk runs if any lane is live.
    /// Can beat the MAC reduction when `N` is not a multiple of `cols`.
    Spatial,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayConfig {
    pub rows: usize,
    pub cols: usize,
    /// Fill/drain cycles per tile; `rows + cols` when absent.
    #[serde(default)]
    pub fill_drain: Option<usize>,
    #[serde(default)]
    pub layout: VectorLayout,
}

impl Default for ArrayConfig {
    fn default() -> Self {
        Self {
            rows: 16,
            cols: 16,
            fill_drain: None,
            layout: VectorLayout::Packed,
        }
    }
}

impl ArrayConfig {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            ..Default::default()
        }
    }

    pub fn fill(&self) -> u64 {
        self.fill_drain.unwrap_or(self.rows + self.cols) as u64
    }

    fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(config_err("array dimensions must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LayerCycles {
    pub layer: String,
    pub dense_cycles: u64,
    pub gated_cycles: u64,
    /// Executed MACs divided by the array size.
    pub theoretical_cycles: f64,
    /// Executed MACs over the MAC slots of `gated_cycles`.
    pub utilization: f64,
    pub executed_macs: u64,
    pub dense_macs: u64,
}

fn k_chunks(k_group: usize, rows: usize) -> u64 {
    k_group.div_ceil(rows) as u64
}

/// Cycles of one layer. Gated layers need their decision map.
pub fn model_layer_cycles(geo: &LayerGeometry, dm: Option<&DecisionMap>, cfg: &ArrayConfig) -> Result<LayerCycles> {
    cfg.validate()?;
    let n = geo.positions();
    if n == 0 || geo.out_channels == 0 || geo.in_channels == 0 {
        return Err(config_err(format!("layer {} has a zero dimension", geo.name)));
    }
    let kk = geo.kernel * geo.kernel;
    let g = geo.groups;
    let k_group = geo.in_channels / g * kk;
    let vec_per_channel = n.div_ceil(cfg.cols) as u64;
    let chunks = k_chunks(k_group, cfg.rows);
    let fill = cfg.fill();
    let tiles = g as u64 * chunks;
    let co = geo.out_channels;
    let dense_cycles = tiles * (co as u64 * vec_per_channel + fill);
    let dense_macs = geo.dense_macs();

    let (gated_cycles, executed_macs) = match (geo.gated, dm) {
        (false, _) => (dense_cycles, dense_macs),
        (true, None) => return Err(config_err(format!("missing decision map for {}", geo.name))),
        (true, Some(dm)) => {
            let cog = co / g;
            let live: Vec<usize> = (0..co).map(|o| dm.effective_count(o)).collect();
            let mut cycles = 0u64;
            for grp in 0..g {
                let base = cog as u64 * vec_per_channel;
                let others = (0..co).filter(|o| o / cog != grp);
                let cond = match cfg.layout {
                    VectorLayout::Packed => {
                        let l = others.map(|o| live[o] as u64).sum::<u64>();
                        (l * vec_per_channel).div_ceil(n as u64)
                    }
                    VectorLayout::PerChannel => others
                        .map(|o| (live[o] as u64 * vec_per_channel).div_ceil(n as u64))
                        .sum(),
                    VectorLayout::Spatial => others
                        .map(|o| {
                            (0..n)
                                .step_by(cfg.cols)
                                .filter(|&s| (s..(s + cfg.cols).min(n)).any(|p| dm.effective(o, p)))
                                .count() as u64
                        })
                        .sum(),
                };
                cycles += chunks * (base + cond + fill);
            }
            let cond_len = geo.conditional_patch_len() as u64;
            (cycles, geo.base_macs() + cond_len * dm.total_effective() as u64)
        }
    };
    let slots = (cfg.rows * cfg.cols) as f64;
    Ok(LayerCycles {
        layer: geo.name.clone(),
        dense_cycles,
        gated_cycles,
        theoretical_cycles: executed_macs as f64 / slots,
        utilization: executed_macs as f64 / (gated_cycles as f64 * slots),
        executed_macs,
        dense_macs,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SpeedupReport {
    /// Per-layer cycles summed over samples.
    pub layers: Vec<LayerCycles>,
    pub dense_cycles: u64,
    pub gated_cycles: u64,
    pub speedup: f64,
    /// Dense MACs over executed MACs, for comparison.
    pub flop_reduction: f64,
}

/// Network speedup `sum(dense) / sum(gated)` over samples; `maps[s][l]`
/// holds the decision map of layer `l` for sample `s`.
pub fn model_network_speedup(
    geos: &[LayerGeometry],
    maps: &[Vec<Option<&DecisionMap>>],
    cfg: &ArrayConfig,
) -> Result<SpeedupReport> {
    let mut layers: Vec<LayerCycles> = geos
        .iter()
        .map(|g| LayerCycles {
            layer: g.name.clone(),
            ..Default::default()
        })
        .collect();
    for sample in maps {
        if sample.len() != geos.len() {
            return Err(config_err("decision maps do not match the layer list"));
        }
        for ((acc, geo), dm) in layers.iter_mut().zip(geos).zip(sample) {
            let c = model_layer_cycles(geo, *dm, cfg)?;
            acc.dense_cycles += c.dense_cycles;
            acc.gated_cycles += c.gated_cycles;
            acc.theoretical_cycles += c.theoretical_cycles;
            acc.executed_macs += c.executed_macs;
            acc.dense_macs += c.dense_macs;
        }
    }
    let slots = (cfg.rows * cfg.cols) as f64;
    for l in &mut layers {
        l.utilization = if l.gated_cycles == 0 {
            0.0
        } else {
            l.executed_macs as f64 / (l.gated_cycles as f64 * slots)
        };
    }
    let dense: u64 = layers.iter().map(|l| l.dense_cycles).sum();
    let gated: u64 = layers.iter().map(|l| l.gated_cycles).sum();
    let dm: u64 = layers.iter().map(|l| l.dense_macs).sum();
    let em: u64 = layers.iter().map(|l| l.executed_macs).sum();
    Ok(SpeedupReport {
        speedup: if gated == 0 { 1.0 } else { dense as f64 / gated as f64 },
        flop_reduction: if em == 0 { 1.0 } else { dm as f64 / em as f64 },
        dense_cycles: dense,
        gated_cycles: gated,
        layers,
    })
}

/// CSV with columns `layer,dense_cycles,gated_cycles,theoretical_cycles,utilization`.
pub fn write_perf_csv<W: std::io::Write>(report: &SpeedupReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "dense_cycles", "gated_cycles", "theoretical_cycles", "utilization"])?;
    for l in &report.layers {
        w.write_record([
            l.layer.clone(),
            l.dense_cycles.to_string(),
            l.gated_cycles.to_string(),
            format!("{:.3}", l.theoretical_cycles),
            format!("{:.6}", l.utilization),
        ])?;
    }
    w.flush()?;
    Ok(())
}
