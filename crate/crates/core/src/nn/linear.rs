use crate::error::{CgError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `y = x W^T + b` for `x: (n, in)`, `W: (out, in)`.
pub fn linear_forward<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &[S]) -> Result<Tensor<S>> {
    let (nb, fin) = flat_dims(x)?;
    let fout = w.dim(0);
    if w.shape() != [fout, fin] || b.len() != fout {
        return Err(CgError::Shape {
            expected: vec![fout, fin],
            actual: w.shape().to_vec(),
        });
    }
    let xd = x.data();
    let wd = w.data();
    let mut out = Vec::with_capacity(nb * fout);
    for n in 0..nb {
        let xr = &xd[n * fin..(n + 1) * fin];
        for o in 0..fout {
            let wr = &wd[o * fin..(o + 1) * fin];
            let acc = xr.iter().zip(wr).fold(S::zero(), |a, (&p, &q)| a + p * q);
            out.push(acc + b[o]);
        }
    }
    Tensor::from_vec(&[nb, fout], out)
}

/// Returns `(dx, dW, db)`; `dx` takes the shape of `x`.
pub fn linear_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    dy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Vec<S>)> {
    let (nb, fin) = flat_dims(x)?;
    let fout = w.dim(0);
    dy.expect_shape(&[nb, fout])?;
    let (xd, wd, gd) = (x.data(), w.data(), dy.data());
    let mut dx = vec![S::zero(); nb * fin];
    let mut dw = vec![S::zero(); fout * fin];
    let mut db = vec![S::zero(); fout];
    for n in 0..nb {
        let xr = &xd[n * fin..(n + 1) * fin];
        let dxr = &mut dx[n * fin..(n + 1) * fin];
        for o in 0..fout {
            let g = gd[n * fout + o];
            db[o] += g;
            let wr = &wd[o * fin..(o + 1) * fin];
            let dwr = &mut dw[o * fin..(o + 1) * fin];
            for i in 0..fin {
                dwr[i] += g * xr[i];
                dxr[i] += g * wr[i];
            }
        }
    }
    Ok((
        Tensor::from_vec(x.shape(), dx)?,
        Tensor::from_vec(w.shape(), dw)?,
        db,
    ))
}

fn flat_dims<S: Scalar>(x: &Tensor<S>) -> Result<(usize, usize)> {
    if x.rank() == 0 {
        return Err(CgError::Degenerate("linear layer on a scalar".into()));
    }
    let nb = x.dim(0);
    Ok((nb, x.len() / nb.max(1)))
}
