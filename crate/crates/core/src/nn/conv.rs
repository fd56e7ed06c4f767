//! 2-D convolution (cross-correlation) with grouping, via im2col + GEMM.
//!
//! No bias: every convolution in this crate is followed by batch norm.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, CgError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    #[serde(default = "one")]
    pub groups: usize,
}

fn one() -> usize {
    1
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            groups,
            ..
        } = *self;
        if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 || groups == 0 {
            return Err(config_err(format!("conv dimensions must be positive: {self:?}")));
        }
        if in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(config_err(format!(
                "channels ({in_channels} in, {out_channels} out) not divisible by groups {groups}"
            )));
        }
        Ok(())
    }

    /// Output spatial size `floor((in + 2p - k)/s) + 1`, which must be at least 1.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let k = self.kernel;
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < k || wp < k {
            return Err(config_err(format!(
                "kernel {k} larger than padded input {hp}x{wp}"
            )));
        }
        Ok(((hp - k) / self.stride + 1, (wp - k) / self.stride + 1))
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel,
            self.kernel,
        ]
    }

    /// Reduction length per output element: `(c_in / groups) * k * k`.
    pub fn patch_len(&self) -> usize {
        self.in_channels / self.groups * self.kernel * self.kernel
    }

    fn check(&self, x: &Tensor<impl Scalar>, w: &Tensor<impl Scalar>) -> Result<([usize; 4], usize, usize)> {
        self.validate()?;
        let dims = x.as_batch_dims()?;
        if dims[1] != self.in_channels {
            return Err(CgError::Shape {
                expected: vec![self.in_channels, dims[2], dims[3]],
                actual: x.shape().to_vec(),
            });
        }
        w.expect_shape(&self.weight_shape())?;
        let (ho, wo) = self.output_hw(dims[2], dims[3])?;
        Ok((dims, ho, wo))
    }
}

/// Unfolds channels `c0..c0+cn` of one `(c,h,w)` sample into a `(cn*k*k) x (ho*wo)`
/// row-major matrix; rows ordered `(channel, kh, kw)`, padded taps are zero.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<S: Scalar>(
    x: &[S],
    h: usize,
    w: usize,
    c0: usize,
    cn: usize,
    spec: &ConvSpec,
    ho: usize,
    wo: usize,
    cols: &mut [S],
) {
    let k = spec.kernel;
    let n = ho * wo;
    let pad = spec.padding as isize;
    for c in 0..cn {
        let plane = &x[(c0 + c) * h * w..(c0 + c + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let row = (c * k + kh) * k + kw;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + kh) as isize - pad;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.iter_mut().for_each(|v| *v = S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kw) as isize - pad;
                        *d = if ix < 0 || ix >= w as isize {
                            S::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds a column matrix back into channels `c0..c0+cn`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im<S: Scalar>(
    cols: &[S],
    h: usize,
    w: usize,
    c0: usize,
    cn: usize,
    spec: &ConvSpec,
    ho: usize,
    wo: usize,
    dx: &mut [S],
) {
    let k = spec.kernel;
    let n = ho * wo;
    let pad = spec.padding as isize;
    for c in 0..cn {
        let plane = &mut dx[(c0 + c) * h * w..(c0 + c + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let row = (c * k + kh) * k + kw;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + kh) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kw) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m x n] += a[m x k] * b[k x n]`, accumulating each output over `k` in ascending order.
pub(crate) fn gemm_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn conv_sample<S: Scalar>(
    xs: &[S],
    w: &[S],
    spec: &ConvSpec,
    h: usize,
    wd: usize,
    ho: usize,
    wo: usize,
    out: &mut [S],
) {
    let g = spec.groups;
    let cin_g = spec.in_channels / g;
    let cout_g = spec.out_channels / g;
    let kk = spec.patch_len();
    let n = ho * wo;
    let mut cols = vec![S::zero(); kk * n];
    out.iter_mut().for_each(|v| *v = S::zero());
    for grp in 0..g {
        im2col(xs, h, wd, grp * cin_g, cin_g, spec, ho, wo, &mut cols);
        let wg = &w[grp * cout_g * kk..(grp + 1) * cout_g * kk];
        let og = &mut out[grp * cout_g * n..(grp + 1) * cout_g * n];
        gemm_acc(wg, &cols, og, cout_g, kk, n);
    }
}

/// Grouped 2-D cross-correlation. Accepts `(c,h,w)` or `(n,c,h,w)` input and returns the same rank.
pub fn conv2d<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, spec: &ConvSpec) -> Result<Tensor<S>> {
    let ([nb, _, h, wd], ho, wo) = spec.check(x, w)?;
    let in_per = spec.in_channels * h * wd;
    let out_per = spec.out_channels * ho * wo;
    let mut out = vec![S::zero(); nb * out_per];
    out.par_chunks_mut(out_per)
        .zip(x.data().par_chunks(in_per))
        .for_each(|(o, xs)| conv_sample(xs, w.data(), spec, h, wd, ho, wo, o));
    let shape: Vec<usize> = if x.rank() == 3 {
        vec![spec.out_channels, ho, wo]
    } else {
        vec![nb, spec.out_channels, ho, wo]
    };
    Tensor::from_vec(&shape, out)
}

/// Direct-loop reference convolution. Slow; used as a correctness oracle.
pub fn conv2d_reference<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, spec: &ConvSpec) -> Result<Tensor<S>> {
    let ([nb, cin, h, wd], ho, wo) = spec.check(x, w)?;
    let cin_g = cin / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    let k = spec.kernel;
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![S::zero(); nb * spec.out_channels * ho * wo];
    for b in 0..nb {
        for o in 0..spec.out_channels {
            let grp = o / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = S::zero();
                    for ci in 0..cin_g {
                        let c = grp * cin_g + ci;
                        for kh in 0..k {
                            for kw in 0..k {
                                let iy = (oy * spec.stride + kh) as isize - spec.padding as isize;
                                let ix = (ox * spec.stride + kw) as isize - spec.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = xd[((b * cin + c) * h + iy as usize) * wd + ix as usize];
                                let wv = wdat[((o * cin_g + ci) * k + kh) * k + kw];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * spec.out_channels + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    let shape: Vec<usize> = if x.rank() == 3 {
        vec![spec.out_channels, ho, wo]
    } else {
        vec![nb, spec.out_channels, ho, wo]
    };
    Tensor::from_vec(&shape, out)
}

/// Gradients of `conv2d` with respect to input and weights.
///
/// Per-sample weight gradients are reduced in sample order, so results do
/// not depend on the number of worker threads.
pub fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    dy: &Tensor<S>,
    spec: &ConvSpec,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let ([nb, _, h, wd], ho, wo) = spec.check(x, w)?;
    let out_per = spec.out_channels * ho * wo;
    if dy.len() != nb * out_per {
        return Err(CgError::Shape {
            expected: vec![nb, spec.out_channels, ho, wo],
            actual: dy.shape().to_vec(),
        });
    }
    let in_per = spec.in_channels * h * wd;
    let g = spec.groups;
    let cin_g = spec.in_channels / g;
    let cout_g = spec.out_channels / g;
    let kk = spec.patch_len();
    let n = ho * wo;
    let wdat = w.data();

    let per_sample: Vec<(Vec<S>, Vec<S>)> = x
        .data()
        .par_chunks(in_per)
        .zip(dy.data().par_chunks(out_per))
        .map(|(xs, dys)| {
            let mut dx = vec![S::zero(); in_per];
            let mut dw = vec![S::zero(); w.len()];
            let mut cols = vec![S::zero(); kk * n];
            let mut dcols = vec![S::zero(); kk * n];
            for grp in 0..g {
                im2col(xs, h, wd, grp * cin_g, cin_g, spec, ho, wo, &mut cols);
                let dyg = &dys[grp * cout_g * n..(grp + 1) * cout_g * n];
                let wg = &wdat[grp * cout_g * kk..(grp + 1) * cout_g * kk];
                let dwg = &mut dw[grp * cout_g * kk..(grp + 1) * cout_g * kk];
                // dW = dY * cols^T
                for o in 0..cout_g {
                    let dyrow = &dyg[o * n..(o + 1) * n];
                    for r in 0..kk {
                        let crow = &cols[r * n..(r + 1) * n];
                        dwg[o * kk + r] += dyrow
                            .iter()
                            .zip(crow)
                            .fold(S::zero(), |a, (&p, &q)| a + p * q);
                    }
                }
                // dcols = W^T * dY
                dcols.iter_mut().for_each(|v| *v = S::zero());
                for o in 0..cout_g {
                    let dyrow = &dyg[o * n..(o + 1) * n];
                    for r in 0..kk {
                        let wv = wg[o * kk + r];
                        let drow = &mut dcols[r * n..(r + 1) * n];
                        for (d, &gy) in drow.iter_mut().zip(dyrow) {
                            *d += wv * gy;
                        }
                    }
                }
                col2im(&dcols, h, wd, grp * cin_g, cin_g, spec, ho, wo, &mut dx);
            }
            (dx, dw)
        })
        .collect();

    let mut dx = Vec::with_capacity(nb * in_per);
    let mut dw = vec![S::zero(); w.len()];
    for (dxs, dws) in per_sample {
        dx.extend_from_slice(&dxs);
        for (a, b) in dw.iter_mut().zip(&dws) {
            *a += *b;
        }
    }
    Ok((
        Tensor::from_vec(x.shape(), dx)?,
        Tensor::from_vec(w.shape(), dw)?,
    ))
}
