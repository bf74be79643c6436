//! Strided matrix-multiply views over flat buffers.

/// Read-only strided view of an `rows × cols` matrix inside a flat buffer.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> View<'a> {
    /// Row-major matrix with `cols` columns starting at `offset`.
    pub fn rows(data: &'a [f64], offset: usize, stride: usize) -> Self {
        Self {
            data,
            offset,
            row_stride: stride,
            col_stride: 1,
        }
    }

    /// Transposed view of a row-major matrix whose rows have `stride` elements.
    pub fn transposed(data: &'a [f64], offset: usize, stride: usize) -> Self {
        Self {
            data,
            offset,
            row_stride: 1,
            col_stride: stride,
        }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride;
        assert!(last < self.data.len(), "gemm view out of bounds");
    }
}

/// `c = alpha · a · b + beta · c`, with `a: m×k`, `b: k×n` and `c` a row-major
/// block of `n` columns at `c_offset` with row stride `c_stride`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: View<'_>,
    b: View<'_>,
    beta: f64,
    c: &mut [f64],
    c_offset: usize,
    c_stride: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = c_offset + i * c_stride + j;
                c[idx] *= beta;
            }
        }
        return;
    }
    a.check(m, k);
    b.check(k, n);
    assert!(c_offset + (m - 1) * c_stride + n <= c.len(), "gemm output out of bounds");
    // SAFETY: every index touched by dgemm lies within the bounds asserted
    // above, and `c` is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr().add(c_offset),
            c_stride as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matches_naive_product() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect();
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, 1.0, View::rows(&a, 0, 3), View::rows(&b, 0, 4), 0.0, &mut c, 0, 4);
        let expect = naive(2, 3, 4, &a, &b);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_view_reads_columns() {
        // a is 2×3; aᵀ·a is 3×3.
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut c = vec![0.0; 9];
        gemm(3, 2, 3, 1.0, View::transposed(&a, 0, 3), View::rows(&a, 0, 3), 0.0, &mut c, 0, 3);
        assert_eq!(c[0], 1.0 + 16.0);
        assert_eq!(c[1], 2.0 + 20.0);
        assert_eq!(c[8], 9.0 + 36.0);
    }
}
