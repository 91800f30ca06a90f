//! Scalar abstraction for the numeric core.
//!
//! The transformer, its optimizer and the loss graph are generic over
//! [`Scalar`], which is [`num_traits::Float`] plus a dense matrix product.
//! Training runs in `f32`; gradient checks instantiate the same code at `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Short name used in checkpoint manifests and diagnostics.
    const NAME: &'static str;

    /// `c = alpha * a * b + beta * c` for matrices given as a buffer plus
    /// `(row_stride, col_stride)`: `a` is `m x k`, `b` is `k x n`, `c` is `m x n`.
    ///
    /// Panics if a stride pattern reaches outside its buffer or if `c`'s
    /// strides would alias two elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
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
    );

    /// `c = alpha * op(a) * op(b) + beta * c` over row-major buffers.
    ///
    /// `a` is `m x k` (or `k x m` when `trans_a`), `b` is `k x n` (or `n x k`
    /// when `trans_b`), `c` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    ) {
        let sa = if trans_a { (1, m) } else { (k, 1) };
        let sb = if trans_b { (1, k) } else { (n, 1) };
        Self::gemm_strided(m, k, n, alpha, a, sa, b, sb, beta, c, (n, 1));
    }

    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every Scalar")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

/// One past the largest offset reached by a `rows x cols` strided view.
fn span(rows: usize, cols: usize, (rs, cs): (usize, usize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $kernel:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            fn gemm_strided(
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
                if m == 0 || n == 0 {
                    return;
                }
                assert!(span(m, k, a_strides) <= a.len(), "gemm: lhs buffer too small");
                assert!(span(k, n, b_strides) <= b.len(), "gemm: rhs buffer too small");
                assert!(span(m, n, c_strides) <= c.len(), "gemm: output buffer too small");
                let (rsc, csc) = c_strides;
                assert!(
                    (csc >= 1 && rsc >= n * csc) || (rsc >= 1 && csc >= m * rsc) || m == 1 || n == 1,
                    "gemm: output strides alias"
                );
                // SAFETY: every index reachable through the strides was bounds
                // checked above and distinct output indices do not alias.
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
                        rsc as isize,
                        csc as isize,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);
