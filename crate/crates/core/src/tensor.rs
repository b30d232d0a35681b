//! Dense row-major tensors over f32 or f64.
//!
//! Element type is a compile-time parameter: f64 is the verification type
//! (oracle comparisons, equivalence suites), f32 the training/bench type.
//! Storage is a flat `Vec<E>`; the last axis is contiguous.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

/// Scalar element of a tensor. Implemented for f32 and f64 only; the gemm
/// hook dispatches to a type-specific kernel so generic code stays fast.
pub trait Scalar:
    Copy
    + std::fmt::Debug
    + std::fmt::Display
    + PartialOrd
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn neg_infinity() -> Self;
    fn is_finite(self) -> bool;
    fn is_nan(self) -> bool;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn abs(self) -> Self;
    fn max_val(self, other: Self) -> Self;

    /// C += A (m×k) · B (k×n) with explicit row/col strides, à la BLAS gemm.
    ///
    /// # Safety
    /// Pointers must cover the strided extents implied by (m, k, n).
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr, $gemm:path) => {
        impl Scalar for $t {
            const DTYPE: DType = $dtype;
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn neg_infinity() -> Self {
                <$t>::NEG_INFINITY
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn is_nan(self) -> bool {
                <$t>::is_nan(self)
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            #[inline]
            fn powi(self, n: i32) -> Self {
                <$t>::powi(self, n)
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn max_val(self, other: Self) -> Self {
                <$t>::max(self, other)
            }

            unsafe fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_scalar!(f32, DType::F32, matrixmultiply::sgemm);
impl_scalar!(f64, DType::F64, matrixmultiply::dgemm);

/// Dense row-major tensor. Immutable in normal dataflow — tape ops produce
/// new tensors — but raw mutation is available for builders and optimizers.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Scalar> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Scalar> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![E::ZERO; numel],
        }
    }

    pub fn full(shape: Vec<usize>, v: E) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; numel],
        }
    }

    pub fn scalar(v: E) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<E>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        debug_assert!(rows.iter().all(|r| r.len() == cols));
        Tensor {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Number of rows when viewed as a matrix (product of all but last axis).
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            return 0;
        }
        self.shape[..self.shape.len() - 1].iter().product()
    }

    /// Length of the last (contiguous) axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn row(&self, i: usize) -> &[E] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn at(&self, idx: &[usize]) -> E {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &dim)) in idx.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < dim, "index {ix} out of bounds at axis {i}");
            off = off * dim + ix;
        }
        self.data[off]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Cast element type, rounding through f64.
    pub fn cast<F: Scalar>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| F::from_f64(x.to_f64())).collect(),
        }
    }
}

/// C (m×n, row-major) = A (m×k) · B (k×n), both row-major contiguous.
pub fn matmul_into<E: Scalar>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(E::ZERO);
        return;
    }
    unsafe {
        E::gemm(
            m,
            k,
            n,
            E::ONE,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            E::ZERO,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C += Aᵀ·B or A·Bᵀ etc., expressed through explicit strides. `ta`/`tb`
/// transpose the logical operands without copying.
pub fn matmul_acc<E: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[E],
    ta: bool,
    b: &[E],
    tb: bool,
    c: &mut [E],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // For a transposed operand the stored matrix is the transpose of the
    // logical one, so its strides swap.
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        E::gemm(
            m,
            k,
            n,
            E::ONE,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            E::ONE,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
