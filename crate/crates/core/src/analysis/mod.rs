//! Cost accounting, partial/final-sum correlation, intensity maps and reports.

pub mod correlation;
pub mod cost;
pub mod intensity;
pub mod report;

pub use correlation::{partial_final_correlation, pearson, CorrelationReport};
pub use cost::{count_flops, count_weight_accesses, gate_comparisons, layer_cost, CostReport, LayerCost};
pub use intensity::{aggregate_intensity, intensity_map, IntensityMap};
pub use report::{write_cost_csv, write_json_summary, SUMMARY_SCHEMA};
