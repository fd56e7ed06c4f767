use crate::error::{config_err, CgError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Non-overlapping max pooling (window = stride = `size`). Returns the
/// output and the flat input index of each selected maximum.
pub fn maxpool_forward<S: Scalar>(x: &Tensor<S>, size: usize) -> Result<(Tensor<S>, Vec<usize>)> {
    let [nb, c, h, w] = x.as_batch_dims()?;
    if size == 0 || h < size || w < size {
        return Err(config_err(format!("max pool {size} on {h}x{w} input")));
    }
    let (ho, wo) = (h / size, w / size);
    let xd = x.data();
    let mut out = Vec::with_capacity(nb * c * ho * wo);
    let mut arg = Vec::with_capacity(out.capacity());
    for plane in 0..nb * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let i = base + (oy * size + dy) * w + ox * size + dx;
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    let shape: Vec<usize> = if x.rank() == 3 { vec![c, ho, wo] } else { vec![nb, c, ho, wo] };
    Ok((Tensor::from_vec(&shape, out)?, arg))
}

pub fn maxpool_backward<S: Scalar>(dy: &Tensor<S>, argmax: &[usize], input_shape: &[usize]) -> Result<Tensor<S>> {
    if dy.len() != argmax.len() {
        return Err(CgError::Shape {
            expected: vec![argmax.len()],
            actual: dy.shape().to_vec(),
        });
    }
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        d[i] += g;
    }
    Ok(dx)
}

/// Spatial mean per channel: `(n,c,h,w) -> (n,c)`.
pub fn global_avg_pool<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let [nb, c, h, w] = x.as_batch_dims()?;
    let hw = h * w;
    if hw == 0 {
        return Err(CgError::Degenerate("global pooling over empty plane".into()));
    }
    let inv = S::one() / S::of_usize(hw);
    let out = x
        .data()
        .chunks(hw)
        .map(|p| p.iter().copied().sum::<S>() * inv)
        .collect();
    Tensor::from_vec(&[nb, c], out)
}

pub fn global_avg_pool_backward<S: Scalar>(dy: &Tensor<S>, input_shape: &[usize]) -> Result<Tensor<S>> {
    let (h, w) = (input_shape[input_shape.len() - 2], input_shape[input_shape.len() - 1]);
    let hw = h * w;
    let inv = S::one() / S::of_usize(hw);
    let mut out = Vec::with_capacity(dy.len() * hw);
    for &g in dy.data() {
        out.extend(std::iter::repeat_n(g * inv, hw));
    }
    Tensor::from_vec(input_shape, out)
}
