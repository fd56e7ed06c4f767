//! Correlation between base-path partial sums and full convolution outputs.

use serde::Serialize;

use crate::error::{config_err, Result};
use crate::gating::base_weights;
use crate::model::{InferenceTrace, Model};
use crate::nn::conv2d;
use crate::scalar::Scalar;

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len().min(y.len());
    if n < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx.sqrt() * syy.sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrelationReport {
    pub groups: Vec<usize>,
    pub layers: Vec<String>,
    /// `r[g][l]` for `groups[g]` and `layers[l]`; `None` for degenerate layers.
    pub r: Vec<Vec<Option<f64>>>,
    /// Mean over non-degenerate layers, per group count.
    pub mean: Vec<f64>,
}

/// Pooled Pearson r between `W_p * x_p` (with the layer regrouped into `G`
/// groups) and `W * x`, over every activation of every traced sample. Uses
/// every convolution whose channel counts are divisible by all `groups`.
/// Traces must carry recorded layer inputs.
pub fn partial_final_correlation<S: Scalar>(
    model: &Model<S>,
    traces: &[InferenceTrace<S>],
    groups: &[usize],
) -> Result<CorrelationReport> {
    if groups.is_empty() || groups.contains(&0) {
        return Err(config_err("group counts must be positive"));
    }
    let convs = model.conv_weights();
    let geos = model.geometries();
    let eligible: Vec<usize> = convs
        .iter()
        .enumerate()
        .filter(|(_, (_, spec, _))| {
            groups
                .iter()
                .all(|&g| spec.in_channels % g == 0 && spec.out_channels % g == 0)
        })
        .map(|(i, _)| i)
        .collect();
    let mut r = vec![Vec::with_capacity(eligible.len()); groups.len()];
    for &ci in &eligible {
        let (name, spec, w) = &convs[ci];
        let li = geos
            .iter()
            .position(|g| &g.name == name)
            .expect("conv layers appear in the geometry list");
        let mut finals = Vec::new();
        let mut partials = vec![Vec::new(); groups.len()];
        for t in traces {
            let x = t.layers[li]
                .input
                .as_ref()
                .ok_or_else(|| config_err("correlation needs traces with recorded inputs"))?;
            let full = conv2d(x, w, spec)?;
            finals.extend(full.data().iter().map(|v| v.as_f64()));
            for (k, &g) in groups.iter().enumerate() {
                let p = conv2d(x, &base_weights(w, g), &spec.with_groups(g))?;
                partials[k].extend(p.data().iter().map(|v| v.as_f64()));
            }
        }
        for (k, p) in partials.iter().enumerate() {
            let v = pearson(p, &finals);
            if v.is_none() {
                log::warn!("layer {name}: zero-variance sums, excluded from correlation");
            }
            r[k].push(v);
        }
    }
    let mean = r
        .iter()
        .map(|row| {
            let vals: Vec<f64> = row.iter().flatten().copied().collect();
            if vals.is_empty() {
                f64::NAN
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        })
        .collect();
    Ok(CorrelationReport {
        groups: groups.to_vec(),
        layers: eligible.iter().map(|&i| convs[i].0.clone()).collect(),
        r,
        mean,
    })
}
