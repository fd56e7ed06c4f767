//! CSV and JSON report emission.

use std::io::Write;

use serde::Serialize;

use crate::analysis::CostReport;
use crate::error::Result;

pub const SUMMARY_SCHEMA: &str = "cgnet.summary/1";

/// One row per layer plus a `total` row.
pub fn write_cost_csv<W: Write>(report: &CostReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "layer",
        "gated",
        "dense_flops",
        "base_flops",
        "conditional_flops_executed",
        "conditional_flops_total",
        "gate_comparisons",
        "weight_values_accessed",
        "weight_values_total",
        "pruning_ratio",
    ])?;
    for l in &report.layers {
        w.write_record([
            l.name.clone(),
            l.gated.to_string(),
            l.dense_flops.to_string(),
            l.base_flops.to_string(),
            l.conditional_flops_executed.to_string(),
            l.conditional_flops_total.to_string(),
            l.gate_comparisons.to_string(),
            l.weight_values_accessed.to_string(),
            l.weight_values_total.to_string(),
            format!("{:.6}", l.pruning_ratio),
        ])?;
    }
    let cond_total: u64 = report.layers.iter().map(|l| l.conditional_flops_total).sum();
    let cond_exec: u64 = report.layers.iter().map(|l| l.conditional_flops_executed).sum();
    let base: u64 = report.layers.iter().map(|l| l.base_flops).sum();
    w.write_record([
        "total".to_string(),
        String::new(),
        report.dense_flops.to_string(),
        base.to_string(),
        cond_exec.to_string(),
        cond_total.to_string(),
        report.gate_comparisons.to_string(),
        report.weight_values_accessed.to_string(),
        report.weight_values_total.to_string(),
        format!("{:.6}", report.pruning_ratio),
    ])?;
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Summary<'a, T: Serialize> {
    schema: &'static str,
    #[serde(flatten)]
    body: &'a T,
}

/// Pretty JSON with a leading `schema` version field.
pub fn write_json_summary<W: Write, T: Serialize>(body: &T, mut out: W) -> Result<()> {
    serde_json::to_writer_pretty(
        &mut out,
        &Summary {
            schema: SUMMARY_SCHEMA,
            body,
        },
    )?;
    out.write_all(b"\n")?;
    Ok(())
}
