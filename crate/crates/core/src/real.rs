//! Scalar abstraction so every kernel runs in 32-bit for the model and 64-bit for gradient checks.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

pub trait Real:
    Float + AddAssign + SubAssign + MulAssign + DivAssign + Sum + Default + Debug + Send + Sync + 'static
{
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;

    /// `c[m×n] = alpha · a[m×k] · b[k×n] + beta · c`, row-major with explicit row/column strides.
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
        rsc: isize,
    );
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn f64(self) -> f64 {
        self as f64
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
        rsc: isize,
    ) {
        check_extent(m, k, rsa, csa, a.len());
        check_extent(k, n, rsb, csb, b.len());
        check_extent(m, n, rsc, 1, c.len());
        // SAFETY: extents of all three operands were checked against the slice lengths above.
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
                rsc,
                1,
            )
        }
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn f64(self) -> f64 {
        self
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
        rsc: isize,
    ) {
        check_extent(m, k, rsa, csa, a.len());
        check_extent(k, n, rsb, csb, b.len());
        check_extent(m, n, rsc, 1, c.len());
        // SAFETY: see the f32 impl.
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
                rsc,
                1,
            )
        }
    }
}

fn check_extent(rows: usize, cols: usize, rs: isize, cs: isize, len: usize) {
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * rs as usize + (cols - 1) * cs as usize;
    assert!(last < len, "gemm operand out of bounds: last index {last}, len {len}");
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3×4
        let mut c = vec![1.0; 8];
        f64::gemm(2, 3, 4, 1.0, &a, 3, 1, &b, 4, 1, 0.0, &mut c, 4);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
    }

    #[test]
    fn gemm_transposed_operand() {
        // aᵀ stored as 3×2, read through swapped strides.
        let at: Vec<f32> = vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b: Vec<f32> = vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = vec![0.0f32; 4];
        f32::gemm(2, 3, 2, 1.0, &at, 1, 2, &b, 2, 1, 0.0, &mut c, 2);
        assert_eq!(c, vec![4.0, 5.0, 10.0, 11.0]);
    }
}
