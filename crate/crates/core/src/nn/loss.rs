use crate::error::{config_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-wise `softmax(z / temperature)` for `(n, classes)` logits.
pub fn softmax<S: Scalar>(logits: &Tensor<S>, temperature: S) -> Tensor<S> {
    let classes = logits.dim(logits.rank() - 1);
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(classes) {
        let m = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
        let mut z = S::zero();
        for v in row.iter_mut() {
            *v = ((*v - m) / temperature).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

/// Row-wise `log softmax(z / temperature)`.
pub fn log_softmax<S: Scalar>(logits: &Tensor<S>, temperature: S) -> Tensor<S> {
    let classes = logits.dim(logits.rank() - 1);
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(classes) {
        let m = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
        let lse = row
            .iter()
            .map(|&v| ((v - m) / temperature).exp())
            .sum::<S>()
            .ln();
        for v in row.iter_mut() {
            *v = (*v - m) / temperature - lse;
        }
    }
    out
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<(S, Tensor<S>)> {
    let nb = logits.dim(0);
    let classes = logits.dim(1);
    if labels.len() != nb {
        return Err(config_err(format!("{} labels for batch of {nb}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(config_err(format!("label {bad} out of range for {classes} classes")));
    }
    let logp = log_softmax(logits, S::one());
    let mut grad = softmax(logits, S::one());
    let inv = S::one() / S::of_usize(nb);
    let mut loss = S::zero();
    for (n, &l) in labels.iter().enumerate() {
        loss -= logp.data()[n * classes + l];
        grad.data_mut()[n * classes + l] -= S::one();
    }
    grad.data_mut().iter_mut().for_each(|g| *g *= inv);
    Ok((loss * inv, grad))
}

pub fn argmax_rows<S: Scalar>(logits: &Tensor<S>) -> Vec<usize> {
    let classes = logits.dim(logits.rank() - 1);
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, S::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
