//! Strided GEMM wrapper. All matrix contractions in the crate go through
//! [`gemm`], which checks the strided views against their buffers before
//! handing them to `matrixmultiply`.

/// Read-only strided view of an `rows × cols` matrix inside a flat buffer.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            offset: 0,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn strided(data: &'a [f64], offset: usize, row_stride: usize, col_stride: usize) -> Self {
        MatRef {
            data,
            offset,
            row_stride,
            col_stride,
        }
    }

    /// The same buffer viewed as the transpose.
    pub fn t(self) -> Self {
        MatRef {
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride;
        assert!(last < self.data.len(), "strided view exceeds buffer");
    }
}

/// `C (+)= A · B` with `A: m×k`, `B: k×n`, and `C` an `m×n` view at
/// `c_offset` with row stride `c_row_stride` and unit column stride.
#[allow(clippy::too_many_arguments)]
pub fn gemm_into(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_>,
    b: MatRef<'_>,
    c: &mut [f64],
    c_offset: usize,
    c_row_stride: usize,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let c_view = MatRef::strided(c, c_offset, c_row_stride, 1);
    c_view.check(m, n);
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                let row = c_offset + i * c_row_stride;
                c[row..row + n].fill(0.0);
            }
        }
        return;
    }
    a.check(m, k);
    b.check(k, n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: every view was bounds-checked above for its full extent, the
    // output buffer is uniquely borrowed, and strides fit in isize for any
    // buffer that fits in memory.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr().add(c_offset),
            c_row_stride as isize,
            1,
        );
    }
}

/// `C (+)= A · B` into a contiguous row-major `m×n` buffer with row stride `ldc`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_>,
    b: MatRef<'_>,
    c: &mut [f64],
    ldc: usize,
    accumulate: bool,
) {
    gemm_into(m, k, n, a, b, c, 0, ldc, accumulate);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_loop() {
        let a: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..20).map(|v| (v as f64).sin()).collect();
        let mut c = vec![0.0; 15];
        gemm(3, 4, 5, MatRef::row_major(&a, 4), MatRef::row_major(&b, 5), &mut c, 5, false);
        let expect = naive(3, 4, 5, &a, &b);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_view_and_accumulate() {
        // A stored as 4x3, used as its 3x4 transpose.
        let at: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let b: Vec<f64> = (0..8).map(|v| v as f64 - 3.0).collect();
        let mut a = vec![0.0; 12];
        for i in 0..4 {
            for j in 0..3 {
                a[j * 4 + i] = at[i * 3 + j];
            }
        }
        let mut c = vec![1.0; 6];
        gemm(3, 4, 2, MatRef::row_major(&at, 3).t(), MatRef::row_major(&b, 2), &mut c, 2, true);
        let expect = naive(3, 4, 2, &a, &b);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - (y + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_inner_dimension_zeroes_output() {
        let mut c = vec![5.0; 4];
        gemm(2, 0, 2, MatRef::row_major(&[], 0), MatRef::row_major(&[], 2), &mut c, 2, false);
        assert_eq!(c, vec![0.0; 4]);
    }
}
