//! Raw numeric kernels shared by forward and backward passes.

/// Row-major strided matrix view description for [`gemm`].
#[derive(Clone, Copy, Debug)]
pub(crate) struct Mat {
    pub offset: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl Mat {
    pub fn rows(offset: usize, cols: usize) -> Self {
        Self {
            offset,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major `rows x cols` block.
    pub fn rows_t(offset: usize, cols: usize) -> Self {
        Self {
            offset,
            row_stride: 1,
            col_stride: cols as isize,
        }
    }
}

/// `c = alpha * a @ b + beta * c` for an `m x k` by `k x n` product.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    am: Mat,
    b: &[f64],
    bm: Mat,
    beta: f64,
    c: &mut [f64],
    cm: Mat,
) {
    if m == 0 || n == 0 {
        return;
    }
    check_extent(a.len(), am, m, k);
    check_extent(b.len(), bm, k, n);
    check_extent(c.len(), cm, m, n);
    // SAFETY: every element addressed by the three views lies within the
    // corresponding slice (checked above), and `c` does not alias `a` or `b`
    // because it is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(am.offset),
            am.row_stride,
            am.col_stride,
            b.as_ptr().add(bm.offset),
            bm.row_stride,
            bm.col_stride,
            beta,
            c.as_mut_ptr().add(cm.offset),
            cm.row_stride,
            cm.col_stride,
        );
    }
}

fn check_extent(len: usize, mat: Mat, rows: usize, cols: usize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = mat.offset as isize
        + (rows as isize - 1) * mat.row_stride
        + (cols as isize - 1) * mat.col_stride;
    assert!(
        mat.row_stride >= 0 && mat.col_stride >= 0 && (last as usize) < len,
        "gemm view out of bounds"
    );
}

/// Geometry of a 1-D convolution over a `(channels, length)` plane.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub in_len: usize,
    pub out_len: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    /// Input position read by output `t` at tap `k`, if inside the signal.
    #[inline]
    pub fn src(&self, t: usize, k: usize) -> Option<usize> {
        let pos = (t * self.stride + k * self.dilation) as isize - self.pad_left as isize;
        (pos >= 0 && (pos as usize) < self.in_len).then_some(pos as usize)
    }
}

/// Unfolds `channels` rows of `x` into a `(channels * kernel, out_len)` matrix.
pub(crate) fn im2col(x: &[f64], channels: usize, g: &ConvGeom, col: &mut [f64]) {
    debug_assert_eq!(col.len(), channels * g.kernel * g.out_len);
    for c in 0..channels {
        let plane = &x[c * g.in_len..(c + 1) * g.in_len];
        for k in 0..g.kernel {
            let row = &mut col[(c * g.kernel + k) * g.out_len..(c * g.kernel + k + 1) * g.out_len];
            for (t, slot) in row.iter_mut().enumerate() {
                *slot = g.src(t, k).map_or(0.0, |p| plane[p]);
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back onto `dx`.
pub(crate) fn col2im(col: &[f64], channels: usize, g: &ConvGeom, dx: &mut [f64]) {
    for c in 0..channels {
        let plane = &mut dx[c * g.in_len..(c + 1) * g.in_len];
        for k in 0..g.kernel {
            let row = &col[(c * g.kernel + k) * g.out_len..(c * g.kernel + k + 1) * g.out_len];
            for (t, &v) in row.iter().enumerate() {
                if let Some(p) = g.src(t, k) {
                    plane[p] += v;
                }
            }
        }
    }
}
