//! Strided GEMM entry point shared by matmul forward and backward.

/// Row/column strides of a matrix operand, in elements.
#[derive(Clone, Copy)]
pub(crate) struct Strides {
    pub row: isize,
    pub col: isize,
}

impl Strides {
    /// Row-major `rows x cols` storage.
    pub fn row_major(cols: usize) -> Self {
        Self {
            row: cols as isize,
            col: 1,
        }
    }

    /// The transpose of row-major storage with `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Self {
            row: 1,
            col: cols as isize,
        }
    }
}

/// `c = a * b + beta * c` with `a: m x k`, `b: k x n`, `c: m x n` (row-major).
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|x| *x *= beta);
        return;
    }
    assert!(max_index(m, k, sa) < a.len());
    assert!(max_index(k, n, sb) < b.len());
    // SAFETY: every index reachable through (dims, strides) was bounds-checked
    // above and `c` is an exclusive, row-major m x n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.row,
            sa.col,
            b.as_ptr(),
            sb.row,
            sb.col,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn max_index(rows: usize, cols: usize, s: Strides) -> usize {
    (rows - 1) * s.row as usize + (cols - 1) * s.col as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_product_with_transposed_operand() {
        // a: 2x3, b stored as 2x3 and read transposed (3x2)
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, -1.0, 2.0, 1.0, 0.5];
        let mut c = [0.0; 4];
        gemm(
            2,
            3,
            2,
            &a,
            Strides::row_major(3),
            &b,
            Strides::transposed(3),
            0.0,
            &mut c,
        );
        let naive = |i: usize, j: usize| (0..3).map(|l| a[i * 3 + l] * b[j * 3 + l]).sum::<f64>();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(c[i * 2 + j], naive(i, j));
            }
        }
    }
}
