//! Scalar abstraction so the same graph code runs in `f32` (training and
//! inference) and `f64` (finite-difference gradient checks).

use core::fmt::{Debug, Display};
use core::iter::Sum;
use core::ops::{AddAssign, MulAssign, SubAssign};
use num_traits::{Float, FromPrimitive};

pub trait Real:
    Float
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// `c = a·b + beta·c` for row-major operands. `a` is `m×k` (or `k×m`
    /// when `a_t`), `b` is `k×n` (or `n×k` when `b_t`), `c` is `m×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        beta: Self,
        c: &mut [Self],
    );

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).unwrap_or_else(Self::nan)
    }

    #[inline]
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

#[inline]
fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    // logical (rows × cols) view of a row-major buffer
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $kernel:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k, "gemm: lhs too short");
                assert!(b.len() >= k * n, "gemm: rhs too short");
                assert!(c.len() >= m * n, "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    for v in &mut c[..m * n] {
                        *v *= beta;
                    }
                    return;
                }
                let (rsa, csa) = strides(m, k, a_t);
                let (rsb, csb) = strides(k, n, b_t);
                // SAFETY: the asserts above guarantee every index reached through
                // these strides lies inside the borrowed slices, and `c` does not
                // alias `a` or `b` (it is a unique borrow).
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
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
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);
