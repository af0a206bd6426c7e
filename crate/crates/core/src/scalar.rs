//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! Training runs in `f32`; gradient checks instantiate the same code with
//! `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar usable as tensor element.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// Gauss error function.
    fn erf(self) -> Self;

    /// `c = alpha * a * b + beta * c` on strided row-major buffers.
    ///
    /// `a` is `m x k` with strides `(rsa, csa)`, `b` is `k x n` with strides
    /// `(rsb, csb)`, `c` is `m x n` contiguous.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );

    /// Lossless conversion from `f64` literals used in formulas.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    fn to_f32_lossy(self) -> f32 {
        self.to_f32().unwrap_or(f32::NAN)
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
    ) {
        assert!(c.len() >= m * n);
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: callers pass buffers sized for the given extents and strides;
        // `c` is contiguous row-major with exactly `m * n` writable elements.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Scalar for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
    ) {
        assert!(c.len() >= m * n);
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: see the f32 implementation.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}
