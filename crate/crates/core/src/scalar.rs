//! Floating-point scalar abstraction shared by the whole engine.
//!
//! Training and evaluation run in `f32`; gradient checks run the very same code
//! paths in `f64`.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar the tensor engine is generic over.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Default
    + Sum
    + Debug
    + Display
    + LowerExp
    + Send
    + Sync
    + 'static
{
    /// Short type name used in reports.
    const NAME: &'static str;

    /// Converts an `f64` literal or statistic into this scalar.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    #[inline]
    fn to_f64c(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    /// Strided GEMM: `c = a·b + beta·c` with `a: m×k`, `b: k×n`, `c: m×n`.
    ///
    /// Strides are in elements; row/column strides may describe transposed views.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );
}

fn check_extent(len: usize, rows: usize, cols: usize, strides: (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) as isize * strides.0 + (cols - 1) as isize * strides.1;
    assert!(
        strides.0 >= 0 && strides.1 >= 0 && (last as usize) < len,
        "gemm operand out of bounds"
    );
}

macro_rules! impl_scalar {
    ($t:ty, $name:expr, $kernel:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                check_extent(a.len(), m, k, a_strides);
                check_extent(b.len(), k, n, b_strides);
                check_extent(c.len(), m, n, c_strides);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every operand extent was bounds-checked above.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0f64, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        let mut c = [0.0f64; 4];
        f64::gemm_raw(2, 3, 2, &a, (3, 1), &b, (2, 1), 0.0, &mut c, (2, 1));
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
    }

    #[test]
    fn gemm_transposed_view() {
        // a^T where a is stored 3x2
        let a = [1.0f32, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b = [1.0f32, 1.0, 1.0];
        let mut c = [0.0f32; 2];
        f32::gemm_raw(2, 3, 1, &a, (1, 2), &b, (1, 1), 0.0, &mut c, (1, 1));
        assert_eq!(c, [6.0, 15.0]);
    }
}
