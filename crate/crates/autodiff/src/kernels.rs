//! Dense kernels shared by forward and backward passes.

/// Strided view of a row-major matrix inside a slice.
#[derive(Clone, Copy)]
pub(crate) struct MatView {
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl MatView {
    pub fn row_major(offset: usize, cols: usize) -> Self {
        Self {
            offset,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transposed view of a row-major `rows x cols` block.
    pub fn transposed(offset: usize, cols: usize) -> Self {
        Self {
            offset,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn extent(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride + 1
    }
}

/// `c = a·b + beta·c` for an `m x k` by `k x n` product.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    av: MatView,
    b: &[f64],
    bv: MatView,
    beta: f64,
    c: &mut [f64],
    cv: MatView,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[cv.offset + i * cv.row_stride + j * cv.col_stride] *= beta;
            }
        }
        return;
    }
    assert!(av.extent(m, k) <= a.len(), "gemm: lhs view out of bounds");
    assert!(bv.extent(k, n) <= b.len(), "gemm: rhs view out of bounds");
    assert!(cv.extent(m, n) <= c.len(), "gemm: output view out of bounds");
    // SAFETY: all three views were bounds-checked against their slices above,
    // and `c` is uniquely borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr().add(av.offset),
            av.row_stride as isize,
            av.col_stride as isize,
            b.as_ptr().add(bv.offset),
            bv.row_stride as isize,
            bv.col_stride as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.row_stride as isize,
            cv.col_stride as isize,
        );
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
