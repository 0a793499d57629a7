// SPDX-License-Identifier: MIT OR Apache-2.0

//! Floating-point scalar abstraction shared by the tensor engine and the model.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Real scalar the whole stack is generic over (`f64` by default, `f32` supported).
///
/// The dense product kernel is a trait hook so that the concrete float types can
/// dispatch to an optimized GEMM while other implementors fall back to loops.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Number of bytes in the little-endian checkpoint encoding of one value.
    const BYTES: usize;

    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `c = alpha * a·b + beta * c` for row/column strided operands.
    ///
    /// `a` is `m×k`, `b` is `k×n`, `c` is `m×n`. Strides are in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    ) {
        gemm_loops(m, k, n, alpha, a, a_strides, b, b_strides, beta, c, c_strides)
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm_loops<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: S,
    a: &[S],
    (rsa, csa): (usize, usize),
    b: &[S],
    (rsb, csb): (usize, usize),
    beta: S,
    c: &mut [S],
    (rsc, csc): (usize, usize),
) {
    for i in 0..m {
        for j in 0..n {
            let mut acc = S::zero();
            for l in 0..k {
                acc += a[i * rsa + l * csa] * b[l * rsb + j * csb];
            }
            let slot = &mut c[i * rsc + j * csc];
            *slot = if beta == S::zero() { alpha * acc } else { alpha * acc + beta * *slot };
        }
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, (rs, cs): (usize, usize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * rs + (cols - 1) * cs;
    assert!(last < len, "strided operand out of bounds: {last} >= {len}");
}

macro_rules! optimized_gemm {
    ($t:ty, $kernel:path, $bytes:expr) => {
        impl Scalar for $t {
            const BYTES: usize = $bytes;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
                c_strides: (usize, usize),
            ) {
                check_extent(a.len(), m, k, a_strides);
                check_extent(b.len(), k, n, b_strides);
                check_extent(c.len(), m, n, c_strides);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every operand extent was bounds-checked above and `c`
                // is borrowed mutably, so it cannot alias `a` or `b`.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0 as isize,
                        c_strides.1 as isize,
                    );
                }
            }
        }
    };
}

optimized_gemm!(f64, matrixmultiply::dgemm, 8);
optimized_gemm!(f32, matrixmultiply::sgemm, 4);

/// Little-endian byte codec used by checkpoints. Values are always stored as
/// 64-bit floats; `f32` widens losslessly.
pub(crate) fn to_le_f64<S: Scalar>(x: S) -> [u8; 8] {
    x.as_f64().to_le_bytes()
}

pub(crate) fn from_le_f64<S: Scalar>(bytes: [u8; 8]) -> S {
    S::lit(f64::from_le_bytes(bytes))
}
