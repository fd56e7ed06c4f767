//! Channel grouping: for output group `i`, input group `i` feeds the base
//! path and all other input groups, in ascending order, feed the
//! conditional path. Also the optional interleaving channel shuffle.

use std::ops::Range;

use crate::error::{config_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Input channels of the base path for output group `i`.
pub fn base_channels(channels: usize, groups: usize, i: usize) -> Range<usize> {
    let per = channels / groups;
    i * per..(i + 1) * per
}

/// Input channels of the conditional path for output group `i`, ascending.
pub fn conditional_channels(channels: usize, groups: usize, i: usize) -> Vec<usize> {
    let base = base_channels(channels, groups, i);
    (0..channels).filter(|c| !base.contains(c)).collect()
}

/// Base/conditional inputs of one output group.
#[derive(Clone, Debug)]
pub struct GroupSplit<S> {
    pub base: Tensor<S>,
    pub conditional: Tensor<S>,
}

/// Splits a `(c,h,w)` feature into per-output-group `(x_p, x_r)` pairs.
pub fn split_grouped<S: Scalar>(x: &Tensor<S>, groups: usize) -> Result<Vec<GroupSplit<S>>> {
    let [_, c, h, w] = x.as_batch_dims()?;
    if x.rank() != 3 {
        return Err(config_err("split_grouped expects a single (c,h,w) feature"));
    }
    if groups == 0 || c % groups != 0 {
        return Err(config_err(format!("{c} channels not divisible into {groups} groups")));
    }
    let hw = h * w;
    let gather = |chs: &mut dyn Iterator<Item = usize>| -> Vec<S> {
        chs.flat_map(|ch| x.data()[ch * hw..(ch + 1) * hw].iter().copied())
            .collect()
    };
    (0..groups)
        .map(|i| {
            let base = base_channels(c, groups, i);
            let cond = conditional_channels(c, groups, i);
            Ok(GroupSplit {
                base: Tensor::from_vec(&[base.len(), h, w], gather(&mut base.clone()))?,
                conditional: Tensor::from_vec(&[cond.len(), h, w], gather(&mut cond.into_iter()))?,
            })
        })
        .collect()
}

/// Destination of each channel under the interleaving shuffle: the channel
/// at (group `g`, offset `j`) moves to `j * groups + g`.
pub fn shuffle_permutation(channels: usize, groups: usize) -> Vec<usize> {
    let per = channels / groups;
    (0..channels).map(|src| (src % per) * groups + src / per).collect()
}

/// Applies a channel permutation `dst = perm[src]` to `(c,h,w)` or `(n,c,h,w)` features.
pub fn permute_channels<S: Scalar>(x: &Tensor<S>, perm: &[usize]) -> Result<Tensor<S>> {
    let [nb, c, h, w] = x.as_batch_dims()?;
    if perm.len() != c {
        return Err(config_err(format!("permutation of {} for {c} channels", perm.len())));
    }
    let hw = h * w;
    let mut out = x.clone();
    for b in 0..nb {
        for (src, &dst) in perm.iter().enumerate() {
            let s = (b * c + src) * hw;
            let d = (b * c + dst) * hw;
            out.data_mut()[d..d + hw].copy_from_slice(&x.data()[s..s + hw]);
        }
    }
    Ok(out)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (src, &dst) in perm.iter().enumerate() {
        inv[dst] = src;
    }
    inv
}

/// Extracts base-path weights of a full `(c_out, c_in, k, k)` kernel as a
/// grouped-conv kernel `(c_out, c_in/G, k, k)`.
pub fn base_weights<S: Scalar>(w: &Tensor<S>, groups: usize) -> Tensor<S> {
    let (co, ci, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    let kk = kh * kw;
    let (cig, cog) = (ci / groups, co / groups);
    let mut out = Vec::with_capacity(co * cig * kk);
    for o in 0..co {
        let base = base_channels(ci, groups, o / cog);
        out.extend_from_slice(&w.data()[(o * ci + base.start) * kk..(o * ci + base.end) * kk]);
    }
    Tensor::from_vec(&[co, cig, kh, kw], out).expect("sizes consistent")
}

/// Adds a grouped-conv kernel gradient into the matching slots of a full kernel gradient.
pub fn scatter_base_weights<S: Scalar>(full: &mut Tensor<S>, base: &Tensor<S>, groups: usize) {
    let (co, ci) = (full.dim(0), full.dim(1));
    let kk = full.dim(2) * full.dim(3);
    let (cig, cog) = (ci / groups, co / groups);
    for o in 0..co {
        let bc = base_channels(ci, groups, o / cog);
        let src = &base.data()[o * cig * kk..(o + 1) * cig * kk];
        let dst = &mut full.data_mut()[(o * ci + bc.start) * kk..(o * ci + bc.end) * kk];
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }
}

/// Partitions a full kernel into `W_p: (G, c_out/G, c_in/G, k, k)` and
/// `W_r: (G, c_out/G, c_in - c_in/G, k, k)`.
pub fn split_weights<S: Scalar>(w: &Tensor<S>, groups: usize) -> Result<(Tensor<S>, Tensor<S>)> {
    if w.rank() != 4 {
        return Err(config_err("kernel must be rank 4"));
    }
    let (co, ci, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    if groups == 0 || co % groups != 0 || ci % groups != 0 {
        return Err(config_err(format!("kernel {co}x{ci} not divisible into {groups} groups")));
    }
    let kk = kh * kw;
    let (cig, cog) = (ci / groups, co / groups);
    let mut wp = Vec::with_capacity(co * cig * kk);
    let mut wr = Vec::with_capacity(co * (ci - cig) * kk);
    for o in 0..co {
        let i = o / cog;
        let row = &w.data()[o * ci * kk..(o + 1) * ci * kk];
        wp.extend_from_slice(&row[base_channels(ci, groups, i).start * kk..base_channels(ci, groups, i).end * kk]);
        for c in conditional_channels(ci, groups, i) {
            wr.extend_from_slice(&row[c * kk..(c + 1) * kk]);
        }
    }
    Ok((
        Tensor::from_vec(&[groups, cog, cig, kh, kw], wp)?,
        Tensor::from_vec(&[groups, cog, ci - cig, kh, kw], wr)?,
    ))
}

/// Inverse of [`split_weights`]: reassembles `W = [W_p | W_r]` per output group.
pub fn assemble_weights<S: Scalar>(wp: &Tensor<S>, wr: &Tensor<S>) -> Result<Tensor<S>> {
    if wp.rank() != 5 || wr.rank() != 5 {
        return Err(config_err("partitioned kernels must be rank 5"));
    }
    let (g, cog, cig, kh, kw) = (wp.dim(0), wp.dim(1), wp.dim(2), wp.dim(3), wp.dim(4));
    let ci = cig * g;
    wr.expect_shape(&[g, cog, ci - cig, kh, kw])?;
    let kk = kh * kw;
    let co = g * cog;
    let mut w = vec![S::zero(); co * ci * kk];
    for o in 0..co {
        let i = o / cog;
        let row = &mut w[o * ci * kk..(o + 1) * ci * kk];
        let b = base_channels(ci, g, i);
        row[b.start * kk..b.end * kk].copy_from_slice(&wp.data()[o * cig * kk..(o + 1) * cig * kk]);
        let rsrc = &wr.data()[o * (ci - cig) * kk..(o + 1) * (ci - cig) * kk];
        for (j, c) in conditional_channels(ci, g, i).into_iter().enumerate() {
            row[c * kk..(c + 1) * kk].copy_from_slice(&rsrc[j * kk..(j + 1) * kk]);
        }
    }
    Tensor::from_vec(&[co, ci, kh, kw], w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn example_split() {
        let x = Tensor::<f64>::from_fn(&[8, 1, 1], |i| i as f64);
        let parts = split_grouped(&x, 4).unwrap();
        assert_eq!(parts[2].base.data(), &[4.0, 5.0]);
        assert_eq!(parts[2].conditional.data(), &[0.0, 1.0, 2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn single_group_has_empty_conditional() {
        let x = Tensor::<f32>::ones(&[3, 2, 2]);
        let parts = split_grouped(&x, 1).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].base.shape(), &[3, 2, 2]);
        assert!(parts[0].conditional.is_empty());
    }

    #[test]
    fn indivisible_is_an_error() {
        assert!(split_grouped(&Tensor::<f32>::ones(&[6, 1, 1]), 4).is_err());
    }

    #[test]
    fn shuffle_interleaves_groups() {
        // 2 groups of 3: (g0: 0,1,2) (g1: 3,4,5) -> 0,3,1,4,2,5
        let perm = shuffle_permutation(6, 2);
        assert_eq!(perm, vec![0, 2, 4, 1, 3, 5]);
        let x = Tensor::<f64>::from_fn(&[6, 1, 1], |i| i as f64);
        let y = permute_channels(&x, &perm).unwrap();
        assert_eq!(y.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let back = permute_channels(&y, &inverse_permutation(&perm)).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn split_and_assemble_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Tensor::<f64>::randn(&[8, 12, 3, 3], 1.0, &mut rng);
        let (wp, wr) = split_weights(&w, 4).unwrap();
        assert_eq!(wp.shape(), &[4, 2, 3, 3, 3]);
        assert_eq!(wr.shape(), &[4, 2, 9, 3, 3]);
        assert_eq!(assemble_weights(&wp, &wr).unwrap(), w);
        assert_eq!(base_weights(&w, 4).data(), wp.data());
    }
}
