//! Dense row-major arrays and the scalar types they hold.
//!
//! Training runs in `f32`; every model type is generic over [`Real`] so the
//! same code can be instantiated in `f64` for finite-difference checks.

use std::fmt::Debug;
use std::iter::Sum;

use num_like::Float;

use crate::error::{ensure, Error, Result};

/// Element type tag, stored in checkpoint manifests.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::Checkpoint(format!("unknown dtype tag {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Minimal float abstraction; kept local so the numeric core has no
/// dependency beyond std.
pub(crate) mod num_like {
    use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

    pub trait Float:
        Copy
        + PartialOrd
        + Add<Output = Self>
        + Sub<Output = Self>
        + Mul<Output = Self>
        + Div<Output = Self>
        + Neg<Output = Self>
        + AddAssign
        + SubAssign
        + MulAssign
    {
        fn exp(self) -> Self;
        fn ln(self) -> Self;
        fn tanh(self) -> Self;
        fn sqrt(self) -> Self;
        fn abs(self) -> Self;
        fn is_finite(self) -> bool;
        fn max(self, other: Self) -> Self;
    }

    macro_rules! impl_float {
        ($t:ty) => {
            impl Float for $t {
                #[inline]
                fn exp(self) -> Self {
                    <$t>::exp(self)
                }
                #[inline]
                fn ln(self) -> Self {
                    <$t>::ln(self)
                }
                #[inline]
                fn tanh(self) -> Self {
                    <$t>::tanh(self)
                }
                #[inline]
                fn sqrt(self) -> Self {
                    <$t>::sqrt(self)
                }
                #[inline]
                fn abs(self) -> Self {
                    <$t>::abs(self)
                }
                #[inline]
                fn is_finite(self) -> bool {
                    <$t>::is_finite(self)
                }
                #[inline]
                fn max(self, other: Self) -> Self {
                    <$t>::max(self, other)
                }
            }
        };
    }
    impl_float!(f32);
    impl_float!(f64);
}

/// Scalar element of a [`Tensor`].
pub trait Real: Float + Default + Debug + Send + Sync + Sum + 'static {
    const DTYPE: DType;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        ensure!(numel == data.len(), Shape, "shape {:?} holds {} values, got {}", shape, numel, data.len());
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![F::ZERO; numel] }
    }

    pub fn vector(data: Vec<F>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn scalar(v: F) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: F) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64() * v.to_f64()).sum()
    }

    /// Converts between element types (used to lift an `f32` model into
    /// `f64` for gradient checks).
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| G::from_f64(v.to_f64())).collect() }
    }
}

/// Dense kernels shared by the tape and the inference paths.
///
/// Reductions use eight independent accumulators so the compiler can
/// vectorise them; the summation order is fixed, which keeps results
/// bit-reproducible.
pub mod kernels {
    use super::Real;

    #[inline]
    pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
        debug_assert_eq!(a.len(), b.len());
        let mut acc = [F::ZERO; 8];
        let chunks_a = a.chunks_exact(8);
        let chunks_b = b.chunks_exact(8);
        let tail_a = chunks_a.remainder();
        let tail_b = chunks_b.remainder();
        for (ca, cb) in chunks_a.zip(chunks_b) {
            for i in 0..8 {
                acc[i] += ca[i] * cb[i];
            }
        }
        let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
        for (x, y) in tail_a.iter().zip(tail_b) {
            s += *x * *y;
        }
        s
    }

    /// `y += a * x`
    #[inline]
    pub fn axpy<F: Real>(a: F, x: &[F], y: &mut [F]) {
        debug_assert_eq!(x.len(), y.len());
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi += a * *xi;
        }
    }

    /// `out = W x` for row-major `W` of shape `[rows, cols]`.
    pub fn matvec<F: Real>(w: &[F], rows: usize, cols: usize, x: &[F], out: &mut [F]) {
        debug_assert_eq!(w.len(), rows * cols);
        for (r, o) in out.iter_mut().enumerate().take(rows) {
            *o = dot(&w[r * cols..(r + 1) * cols], x);
        }
    }

    /// `out += W^T g`
    pub fn matvec_t_acc<F: Real>(w: &[F], rows: usize, cols: usize, g: &[F], out: &mut [F]) {
        for (r, &gr) in g.iter().enumerate().take(rows) {
            if gr != F::ZERO {
                axpy(gr, &w[r * cols..(r + 1) * cols], out);
            }
        }
    }

    /// `dW += g x^T`
    pub fn outer_acc<F: Real>(g: &[F], x: &[F], dw: &mut [F]) {
        let cols = x.len();
        for (r, &gr) in g.iter().enumerate() {
            if gr != F::ZERO {
                axpy(gr, x, &mut dw[r * cols..(r + 1) * cols]);
            }
        }
    }

    #[inline]
    pub fn sigmoid<F: Real>(x: F) -> F {
        // Branch keeps exp() from overflowing for large |x|.
        if x >= F::ZERO {
            F::ONE / (F::ONE + (-x).exp())
        } else {
            let e = x.exp();
            e / (F::ONE + e)
        }
    }

    /// Numerically stable log-sum-exp.
    pub fn log_sum_exp<F: Real>(x: &[F]) -> F {
        let m = x.iter().copied().fold(x[0], F::max);
        let s: F = x.iter().map(|&v| (v - m).exp()).sum();
        m + s.ln()
    }

    pub fn softmax<F: Real>(x: &[F], out: &mut [F]) {
        let m = x.iter().copied().fold(x[0], F::max);
        let mut s = F::ZERO;
        for (o, &v) in out.iter_mut().zip(x) {
            *o = (v - m).exp();
            s += *o;
        }
        for o in out.iter_mut() {
            *o = *o / s;
        }
    }

    pub fn log_softmax<F: Real>(x: &[F], out: &mut [F]) {
        let lse = log_sum_exp(x);
        for (o, &v) in out.iter_mut().zip(x) {
            *o = v - lse;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::kernels::*;
    use super::*;

    #[test]
    fn new_rejects_bad_shape() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn dot_matches_naive_on_odd_lengths() {
        for n in [0usize, 1, 7, 8, 9, 33] {
            let a: Vec<f64> = (0..n).map(|i| i as f64 * 0.5 - 1.0).collect();
            let b: Vec<f64> = (0..n).map(|i| 2.0 - i as f64 * 0.25).collect();
            let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            assert!((dot(&a, &b) - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_a_distribution_for_extreme_logits() {
        let x = [50.0f64, -50.0, 0.0, 49.9];
        let mut p = [0.0; 4];
        softmax(&x, &mut p);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn sigmoid_saturates_without_nan() {
        assert_eq!(sigmoid(1000.0f32), 1.0);
        assert_eq!(sigmoid(-1000.0f32), 0.0);
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cast_roundtrip_f32_f64() {
        let t = Tensor::vector(vec![0.1f32, -2.5, 3.25]);
        let back: Tensor<f32> = t.cast::<f64>().cast();
        assert_eq!(t, back);
    }
}
