//! Dense kernels shared by the graph ops: gemm and the im2col transforms
//! that lower stride-1, zero-padded convolution onto it.

/// `c = op(a) · op(b) + beta · c` with `op(a)` of shape `m × k` and `op(b)`
/// of shape `k × n`. `trans_a` means `a` is stored `k × m` row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    // SAFETY: the asserts above bound every index the kernel touches by the
    // slice lengths for the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

/// Geometry of a stride-1 square-kernel convolution over an NCHW batch.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

/// Unfolds `x` into a `(c·k·k) × (n·oh·ow)` matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols_n = g.col_cols();
    let mut cols = vec![0.0; g.col_rows() * cols_n];
    let plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * plane..(n * g.c + c + 1) * plane];
                    let dst = &mut dst_row[n * out_plane..(n + 1) * out_plane];
                    for oi in 0..g.oh {
                        let ii = oi + ki;
                        if ii < g.pad || ii - g.pad >= g.h {
                            continue;
                        }
                        let ii = ii - g.pad;
                        for oj in 0..g.ow {
                            let jj = oj + kj;
                            if jj < g.pad || jj - g.pad >= g.w {
                                continue;
                            }
                            dst[oi * g.ow + oj] = src[ii * g.w + (jj - g.pad)];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds column gradients back onto the input.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let cols_n = g.col_cols();
    let plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.n {
                    let dst = &mut dx[(n * g.c + c) * plane..(n * g.c + c + 1) * plane];
                    let src = &src_row[n * out_plane..(n + 1) * out_plane];
                    for oi in 0..g.oh {
                        let ii = oi + ki;
                        if ii < g.pad || ii - g.pad >= g.h {
                            continue;
                        }
                        let ii = ii - g.pad;
                        for oj in 0..g.ow {
                            let jj = oj + kj;
                            if jj < g.pad || jj - g.pad >= g.w {
                                continue;
                            }
                            dst[ii * g.w + (jj - g.pad)] += src[oi * g.ow + oj];
                        }
                    }
                }
            }
        }
    }
}
