//! Raw numerical kernels shared by the tape operations.
//!
//! Everything here works on flat row-major slices; shape bookkeeping is the
//! caller's job.

/// `c = a·b (+ c if accumulate)` where `a` is `m×k` and `b` is `k×n`.
/// `trans_a` / `trans_b` read the stored matrix as its transpose, so a
/// stored `k×m` buffer with `trans_a = true` acts as `m×k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above pin every buffer to the extent implied by
    // (m, k, n) and the strides, so all accesses stay in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    /// Geometry of a forward cross-correlation; `None` if the kernel does
    /// not fit the padded input.
    pub fn conv(
        c_in: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
            return None;
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Some(Self {
            c_in,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one image `[c_in, h, w]` into `[c_in·kh·kw, oh·ow]`.
pub fn im2col(x: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let ncol = g.col_cols();
    debug_assert_eq!(cols.len(), g.col_rows() * ncol);
    let pad = g.pad as isize;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let out = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + i) as isize - pad;
                    let dst = &mut out[oy * g.ow..(oy + 1) * g.ow];
                    if y < 0 || y >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[y as usize * g.w..(y as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let x = (ox * g.stride + j) as isize - pad;
                        *d = if x < 0 || x >= g.w as isize {
                            0.0
                        } else {
                            src[x as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into `[c_in, h, w]`.
pub fn col2im(cols: &[f64], g: &ConvGeometry, x: &mut [f64]) {
    let ncol = g.col_cols();
    let pad = g.pad as isize;
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + i) as isize - pad;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.w..(y as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let x = (ox * g.stride + j) as isize - pad;
                        if x >= 0 && x < g.w as isize {
                            dst[x as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched cross-correlation. `x` is `[n, c_in, h, w]`, `k` is
/// `[c_out, c_in, kh, kw]`; returns `[n, c_out, oh, ow]`.
pub fn conv2d_forward(x: &[f64], n: usize, k: &[f64], c_out: usize, g: &ConvGeometry) -> Vec<f64> {
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = c_out * g.col_cols();
    let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
    let mut y = vec![0.0; n * out_sz];
    for b in 0..n {
        im2col(&x[b * in_sz..(b + 1) * in_sz], g, &mut cols);
        gemm(
            c_out,
            g.col_rows(),
            g.col_cols(),
            k,
            false,
            &cols,
            false,
            &mut y[b * out_sz..(b + 1) * out_sz],
            false,
        );
    }
    y
}

/// Gradients of [`conv2d_forward`]. Returns `(dx, dk)`; either may be
/// skipped.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    n: usize,
    k: &[f64],
    c_out: usize,
    g: &ConvGeometry,
    dy: &[f64],
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = c_out * g.col_cols();
    let rows = g.col_rows();
    let ncol = g.col_cols();
    let mut cols = vec![0.0; rows * ncol];
    let mut dx = want_dx.then(|| vec![0.0; n * in_sz]);
    let mut dk = want_dk.then(|| vec![0.0; k.len()]);
    for b in 0..n {
        let dyb = &dy[b * out_sz..(b + 1) * out_sz];
        if let Some(dk) = dk.as_mut() {
            im2col(&x[b * in_sz..(b + 1) * in_sz], g, &mut cols);
            // dk[c_out, rows] += dy[c_out, ncol] · colsᵀ
            gemm(c_out, ncol, rows, dyb, false, &cols, true, dk, true);
        }
        if let Some(dx) = dx.as_mut() {
            // dcols[rows, ncol] = kᵀ · dy
            gemm(rows, c_out, ncol, k, true, dyb, false, &mut cols, false);
            col2im(&cols, g, &mut dx[b * in_sz..(b + 1) * in_sz]);
        }
    }
    (dx, dk)
}

/// Geometry of a transposed convolution expressed as the conv whose
/// data-gradient it is: the *output* of the transposed conv plays the role
/// of the conv input.
pub fn conv_transpose_geometry(
    c_out: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Option<ConvGeometry> {
    if stride == 0 {
        return None;
    }
    let oh = ((h - 1) * stride + kh).checked_sub(2 * pad)?;
    let ow = ((w - 1) * stride + kw).checked_sub(2 * pad)?;
    if oh == 0 || ow == 0 {
        return None;
    }
    let g = ConvGeometry::conv(c_out, oh, ow, kh, kw, stride, pad)?;
    (g.oh == h && g.ow == w).then_some(g)
}

/// Transposed convolution. `x` is `[n, c_in, h, w]`, `k` is
/// `[c_in, c_out, kh, kw]`, `g` comes from [`conv_transpose_geometry`]
/// (so `g.c_in == c_out`, `g.oh == h`). Returns `[n, c_out, g.h, g.w]`.
pub fn conv_transpose_forward(x: &[f64], n: usize, c_in: usize, k: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let in_sz = c_in * g.col_cols();
    let out_sz = g.c_in * g.h * g.w;
    let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
    let mut y = vec![0.0; n * out_sz];
    for b in 0..n {
        // cols[c_out·kh·kw, h·w] = kᵀ · x_b   with k viewed as [c_in, c_out·kh·kw]
        gemm(
            g.col_rows(),
            c_in,
            g.col_cols(),
            k,
            true,
            &x[b * in_sz..(b + 1) * in_sz],
            false,
            &mut cols,
            false,
        );
        col2im(&cols, g, &mut y[b * out_sz..(b + 1) * out_sz]);
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose_backward(
    x: &[f64],
    n: usize,
    c_in: usize,
    k: &[f64],
    g: &ConvGeometry,
    dy: &[f64],
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let in_sz = c_in * g.col_cols();
    let out_sz = g.c_in * g.h * g.w;
    let rows = g.col_rows();
    let ncol = g.col_cols();
    let mut cols = vec![0.0; rows * ncol];
    let mut dx = want_dx.then(|| vec![0.0; n * in_sz]);
    let mut dk = want_dk.then(|| vec![0.0; k.len()]);
    for b in 0..n {
        im2col(&dy[b * out_sz..(b + 1) * out_sz], g, &mut cols);
        if let Some(dx) = dx.as_mut() {
            // dx_b[c_in, ncol] = k[c_in, rows] · cols
            gemm(c_in, rows, ncol, k, false, &cols, false, &mut dx[b * in_sz..(b + 1) * in_sz], false);
        }
        if let Some(dk) = dk.as_mut() {
            // dk[c_in, rows] += x_b[c_in, ncol] · colsᵀ
            gemm(c_in, ncol, rows, &x[b * in_sz..(b + 1) * in_sz], false, &cols, true, dk, true);
        }
    }
    (dx, dk)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_for_all_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive_matmul(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, ta, bb, tb, &mut c, false);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let g = ConvGeometry::conv(2, 5, 6, 3, 2, 2, 1).unwrap();
        let x: Vec<f64> = (0..2 * 5 * 6).map(|i| (i as f64 * 0.7).sin()).collect();
        let c: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|i| (i as f64 * 0.3).cos())
            .collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&c, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn conv_output_size() {
        let g = ConvGeometry::conv(1, 64, 64, 4, 4, 4, 0).unwrap();
        assert_eq!((g.oh, g.ow), (16, 16));
        let g = ConvGeometry::conv(1, 8, 8, 3, 3, 2, 1).unwrap();
        assert_eq!((g.oh, g.ow), (4, 4));
        assert!(ConvGeometry::conv(1, 2, 2, 5, 5, 1, 1).is_none());
    }

    #[test]
    fn transpose_geometry_inverts_conv() {
        let g = conv_transpose_geometry(3, 4, 4, 4, 4, 2, 1).unwrap();
        assert_eq!((g.h, g.w), (8, 8));
        assert_eq!((g.oh, g.ow), (4, 4));
    }
}
