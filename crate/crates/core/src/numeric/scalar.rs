use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of tensors, tapes and models.
///
/// Implemented for `f32` and `f64`. The toolkit defaults to `f64` (see the
/// aliases at the crate root); `f32` is supported for every forward and
/// backward path but the oracle tolerances are stated for `f64`.
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
    /// In-memory width. Checkpoints always store 64-bit values regardless.
    const BITS: u32;

    /// `c = alpha * a·b + beta * c` for row-major operands given by strides.
    ///
    /// `a` is `m×k` with strides `(rsa, csa)`, `b` is `k×n` with strides
    /// `(rsb, csb)`, `c` is a dense row-major `m×n` buffer.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

#[allow(clippy::too_many_arguments)]
fn check_gemm_bounds(
    m: usize,
    k: usize,
    n: usize,
    a_len: usize,
    (rsa, csa): (usize, usize),
    b_len: usize,
    (rsb, csb): (usize, usize),
    c_len: usize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let a_max = (m - 1) * rsa + (k - 1) * csa;
    let b_max = (k - 1) * rsb + (n - 1) * csb;
    assert!(a_max < a_len, "gemm: lhs buffer too small");
    assert!(b_max < b_len, "gemm: rhs buffer too small");
    assert!(m * n <= c_len, "gemm: output buffer too small");
}

macro_rules! impl_scalar {
    ($t:ty, $bits:expr, $kernel:path) => {
        impl Scalar for $t {
            const BITS: u32 = $bits;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
            ) {
                check_gemm_bounds(m, k, n, a.len(), (rsa, csa), b.len(), (rsb, csb), c.len());
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    for v in c[..m * n].iter_mut() {
                        *v *= beta;
                    }
                    return;
                }
                // SAFETY: every index touched by the kernel was bounds-checked
                // above against the slice lengths.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
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

impl_scalar!(f32, 32, matrixmultiply::sgemm);
impl_scalar!(f64, 64, matrixmultiply::dgemm);
