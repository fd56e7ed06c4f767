//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! All tensor math, gating and training code is generic over [`Scalar`],
//! implemented for `f32` and `f64`. Beyond the usual float arithmetic the
//! trait exposes a total order on bit patterns (used to merge the gate
//! normalizer into an exact per-channel threshold) and little-endian
//! serialization for checkpoints.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Element type tag stored in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + LowerExp
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    /// Converts an `f64` literal. Panics only for values unrepresentable as a float, which cannot happen.
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal converts to float")
    }

    #[inline]
    fn of_usize(v: usize) -> Self {
        Self::from_usize(v).expect("usize converts to float")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }

    /// Maps the value onto a signed integer so that integer order equals
    /// float order (`-0.0` and `+0.0` both map to 0). NaN is unsupported.
    fn to_ordered(self) -> i64;

    /// Inverse of [`Scalar::to_ordered`].
    fn from_ordered(o: i64) -> Self;

    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one value from the first `DTYPE.size()` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn to_ordered(self) -> i64 {
        let b = self.to_bits() as i32;
        if b >= 0 {
            b as i64
        } else {
            (i32::MIN as i64) - (b as i64)
        }
    }

    fn from_ordered(o: i64) -> Self {
        let bits = if o >= 0 { o as i32 } else { ((i32::MIN as i64) - o) as i32 };
        f32::from_bits(bits as u32)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn to_ordered(self) -> i64 {
        let b = self.to_bits() as i64;
        if b >= 0 {
            b
        } else {
            i64::MIN - b
        }
    }

    fn from_ordered(o: i64) -> Self {
        let bits = if o >= 0 { o } else { i64::MIN - o };
        f64::from_bits(bits as u64)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Smallest value `x` (over all finite floats) for which `pred(x)` holds,
/// assuming `pred` is monotone non-decreasing. Returns `-inf` when the
/// predicate already holds at the most negative finite value and `+inf`
/// when it never holds.
pub fn lowest_satisfying<S: Scalar>(pred: impl Fn(S) -> bool) -> S {
    let lo = S::max_value().neg().to_ordered();
    let hi = S::max_value().to_ordered();
    if pred(S::from_ordered(lo)) {
        return S::neg_infinity();
    }
    if !pred(S::from_ordered(hi)) {
        return S::infinity();
    }
    // invariant: pred(lo) false, pred(hi) true
    let (mut lo, mut hi) = (lo, hi);
    while (hi as i128) - (lo as i128) > 1 {
        let mid = ((lo as i128 + hi as i128) / 2) as i64;
        if pred(S::from_ordered(mid)) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    S::from_ordered(hi)
}

/// Largest finite `x` for which `pred(x)` holds, assuming `pred` is monotone
/// non-increasing. Returns `+inf` / `-inf` in the saturated cases.
pub fn highest_satisfying<S: Scalar>(pred: impl Fn(S) -> bool) -> S {
    let lo = S::max_value().neg().to_ordered();
    let hi = S::max_value().to_ordered();
    if pred(S::from_ordered(hi)) {
        return S::infinity();
    }
    if !pred(S::from_ordered(lo)) {
        return S::neg_infinity();
    }
    let (mut lo, mut hi) = (lo, hi);
    while (hi as i128) - (lo as i128) > 1 {
        let mid = ((lo as i128 + hi as i128) / 2) as i64;
        if pred(S::from_ordered(mid)) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    S::from_ordered(lo)
}
