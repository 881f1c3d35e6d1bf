//! Thin wrapper over `matrixmultiply::dgemm` with explicit strides.

/// Strided view of a row-major or transposed matrix.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols);
        Self {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// The transpose, without copying.
    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// # Safety
/// `out` must be valid for writes of `a.rows * b.cols` contiguous values, and
/// for reads too when `beta != 0`. It must not alias `a` or `b`.
unsafe fn dgemm_raw(a: MatRef<'_>, b: MatRef<'_>, out: *mut f64, beta: f64) {
    assert_eq!(a.cols, b.rows, "gemm inner extents");
    // The operand views are in bounds: `MatRef::new` checks the extents and
    // `t()` only swaps the (rows, stride) pairs.
    matrixmultiply::dgemm(
        a.rows,
        a.cols,
        b.cols,
        1.0,
        a.data.as_ptr(),
        a.row_stride,
        a.col_stride,
        b.data.as_ptr(),
        b.row_stride,
        b.col_stride,
        beta,
        out,
        b.cols as isize,
        1,
    );
}

/// `out = a · b + (accumulate ? out : 0)`, with `out` row-major `a.rows × b.cols`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, out: &mut [f64], accumulate: bool) {
    let len = a.rows * b.cols;
    assert!(out.len() >= len);
    if a.cols == 0 {
        if !accumulate {
            out[..len].fill(0.0);
        }
        return;
    }
    // SAFETY: `out` is an initialized, exclusively borrowed buffer of at least `len` values.
    unsafe { dgemm_raw(a, b, out.as_mut_ptr(), if accumulate { 1.0 } else { 0.0 }) }
}

/// `a · b` into a freshly allocated row-major buffer.
pub(crate) fn gemm_new(a: MatRef<'_>, b: MatRef<'_>) -> Vec<f64> {
    let len = a.rows * b.cols;
    if a.cols == 0 || len == 0 {
        return vec![0.0; len];
    }
    let mut out = Vec::with_capacity(len);
    // SAFETY: with beta = 0 dgemm writes all `len` outputs without reading
    // them, so the buffer is initialized before `set_len`.
    unsafe {
        dgemm_raw(a, b, out.as_mut_ptr(), 0.0);
        out.set_len(len);
    }
    out
}
