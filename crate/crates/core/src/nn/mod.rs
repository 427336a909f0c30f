//! Minimal layer library with hand-written backward passes.
//!
//! Everything is generic over [`Real`] so the same code trains in `f32` and is
//! gradient-checked in `f64`. Tensors are dense NCHW buffers.

mod adam;
mod batchnorm;
mod conv;
mod linear;
mod pool;

pub use adam::{Adam, AdamConfig, AdamState};
pub use batchnorm::{BatchNorm2d, BnCache};
pub use conv::Conv2d;
pub use linear::Linear;
pub use pool::{max_pool2x2, max_pool2x2_backward, PoolCache};

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point type the layers run in.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// `c = alpha * a * b + beta * c` on row-major buffers with explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_cols: usize,
    );

    #[inline]
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_cols: usize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(c.len() >= (m - 1) * c_cols + n);
                if k > 0 {
                    let a_last = (m as isize - 1) * a_strides.0 + (k as isize - 1) * a_strides.1;
                    let b_last = (k as isize - 1) * b_strides.0 + (n as isize - 1) * b_strides.1;
                    assert!((a_last as usize) < a.len() && (b_last as usize) < b.len());
                }
                // SAFETY: bounds of all three operands are asserted above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_cols as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Row-major `m x k` times `k x n`, accumulating into `c` scaled by `beta`.
pub fn matmul<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        (k as isize, 1),
        b,
        (n as isize, 1),
        beta,
        c,
        n,
    );
}

/// `a^T * b` where `a` is stored `k x m`.
pub fn matmul_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        (1, m as isize),
        b,
        (n as isize, 1),
        beta,
        c,
        n,
    );
}

/// `a * b^T` where `b` is stored `n x k`.
pub fn matmul_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        (k as isize, 1),
        b,
        (1, k as isize),
        beta,
        c,
        n,
    );
}

/// Dense NCHW tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![T::zero(); n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor buffer size");
        Self { n, c, h, w, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    #[inline]
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let s = self.sample_len();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [T] {
        let s = self.sample_len();
        &mut self.data[i * s..(i + 1) * s]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// In-place ReLU. Returns the activated tensor; the output itself serves as the mask.
pub fn relu_inplace<T: Real>(x: &mut [T]) {
    for v in x.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes gradient entries where the forward ReLU output was not positive.
pub fn relu_backward_inplace<T: Real>(output: &[T], grad: &mut [T]) {
    for (g, &y) in grad.iter_mut().zip(output) {
        if y <= T::zero() {
            *g = T::zero();
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Inverted dropout mask: entries are 0 or `1/(1-rate)`.
pub fn dropout_mask<T: Real, R: Rng>(len: usize, rate: f64, rng: &mut R) -> Vec<T> {
    if rate <= 0.0 {
        return vec![T::one(); len];
    }
    let keep = T::of(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| {
            if rng.gen::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect()
}

/// Anything owning trainable buffers. Both methods must yield buffers in the same order.
pub trait ParamSet<T> {
    fn tensors(&self) -> Vec<&[T]>;
    fn tensors_mut(&mut self) -> Vec<&mut [T]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn zero(&mut self)
    where
        T: Real,
    {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    /// `self += other`, buffer by buffer.
    fn accumulate(&mut self, other: &Self)
    where
        T: Real,
        Self: Sized,
    {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
}

/// He-normal initialization for a fan-in.
pub fn he_normal<T: Real, R: Rng>(len: usize, fan_in: usize, rng: &mut R) -> Vec<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    (0..len)
        .map(|_| T::of(std * standard_normal(rng)))
        .collect()
}

/// Glorot-uniform initialization.
pub fn glorot_uniform<T: Real, R: Rng>(
    len: usize,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Vec<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..len)
        .map(|_| T::of(rng.gen_range(-limit..limit)))
        .collect()
}

pub(crate) fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    StandardNormal.sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree_with_naive() {
        let a: Vec<f64> = (0..6).map(|x| x as f64 - 2.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|x| (x as f64) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        matmul(2, 3, 4, &a, &b, 0.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // a^T stored as 3x2
        let at: Vec<f64> = (0..6).map(|idx| a[(idx % 2) * 3 + idx / 2]).collect();
        let mut c2 = vec![0.0; 8];
        matmul_tn(2, 3, 4, &at, &b, 0.0, &mut c2);
        assert_eq!(c, c2);
        // b^T stored as 4x3
        let bt: Vec<f64> = (0..12).map(|idx| b[(idx % 3) * 4 + idx / 3]).collect();
        let mut c3 = vec![0.0; 8];
        matmul_nt(2, 3, 4, &a, &bt, 0.0, &mut c3);
        assert_eq!(c, c3);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert!(sigmoid(800.0f64) <= 1.0);
        assert!((sigmoid(2.0f32) - 0.880797).abs() < 1e-6);
    }
}
