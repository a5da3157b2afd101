//! Convolution and pooling kernels on raw NCHW buffers.
//!
//! Convolutions lower to GEMM through im2col, processed in bands of output
//! rows so the column buffer stays bounded for large images.

use crate::error::{Error, Result};

/// Upper bound on im2col buffer size, in values.
const COL_BUDGET: usize = 1 << 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Geometry of a "same"-padded convolution of an `[n, c, h, w]` input with
    /// an `[o, c, kh, kw]` kernel.
    pub fn new(x: &[usize], k: &[usize], stride: usize) -> Result<Self> {
        if x.len() != 4 || k.len() != 4 {
            return Err(Error::shape("conv2d", format!("need 4-D input and kernel, got {x:?} and {k:?}")));
        }
        if x[1] != k[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {} vs kernel channels {} (input {x:?}, kernel {k:?})", x[1], k[1]),
            ));
        }
        if stride == 0 || k[2].is_multiple_of(2) || k[3].is_multiple_of(2) {
            return Err(Error::shape("conv2d", format!("need odd kernel and stride >= 1, got {k:?} stride {stride}")));
        }
        let (pad_h, pad_w) = (k[2] / 2, k[3] / 2);
        let ho = (x[2] + 2 * pad_h - k[2]) / stride + 1;
        let wo = (x[3] + 2 * pad_w - k[3]) / stride + 1;
        Ok(ConvGeom { n: x[0], c: x[1], h: x[2], w: x[3], o: k[0], kh: k[2], kw: k[3], stride, pad_h, pad_w, ho, wo })
    }

    pub fn ck(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn in_shape(&self) -> Vec<usize> {
        vec![self.n, self.c, self.h, self.w]
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.o, self.ho, self.wo]
    }

    pub fn kernel_shape(&self) -> Vec<usize> {
        vec![self.o, self.c, self.kh, self.kw]
    }

    fn band_rows(&self) -> usize {
        (COL_BUDGET / (self.ck() * self.wo).max(1)).clamp(1, self.ho)
    }

    fn bands(&self) -> impl Iterator<Item = (usize, usize)> {
        let step = self.band_rows();
        let ho = self.ho;
        (0..ho).step_by(step).map(move |r| (r, (r + step).min(ho)))
    }
}

/// Writes the patches of output rows `r0..r1` into columns `off..off + p`
/// of a row-major matrix with `ld` columns.
fn im2col(g: &ConvGeom, x: &[f64], r0: usize, r1: usize, cols: &mut [f64], ld: usize, off: usize) {
    let p = (r1 - r0) * g.wo;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * ld + off..row * ld + off + p];
                for oy in r0..r1 {
                    let iy = (oy * g.stride + i) as isize - g.pad_h as isize;
                    let d = &mut dst[(oy - r0) * g.wo..(oy - r0 + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        d.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let (lo, hi) = valid_cols(g, j);
                    d[..lo].fill(0.0);
                    d[hi..].fill(0.0);
                    if lo == hi {
                        continue;
                    }
                    let x0 = lo * g.stride + j - g.pad_w;
                    if g.stride == 1 {
                        d[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                    } else {
                        for (k, v) in d[lo..hi].iter_mut().enumerate() {
                            *v = src[x0 + k * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `lo..hi` whose kernel tap `j` lands inside the input row.
fn valid_cols(g: &ConvGeom, j: usize) -> (usize, usize) {
    // ix = ox * stride + j - pad must lie in [0, w).
    let lo = g.pad_w.saturating_sub(j).div_ceil(g.stride).min(g.wo);
    let hi = if g.w + g.pad_w <= j { 0 } else { (g.w + g.pad_w - j - 1) / g.stride + 1 };
    (lo, hi.clamp(lo, g.wo))
}

fn col2im(g: &ConvGeom, cols: &[f64], r0: usize, r1: usize, x: &mut [f64], ld: usize, off: usize) {
    let p = (r1 - r0) * g.wo;
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * ld + off..row * ld + off + p];
                for oy in r0..r1 {
                    let iy = (oy * g.stride + i) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[(oy - r0) * g.wo..(oy - r0 + 1) * g.wo];
                    let (lo, hi) = valid_cols(g, j);
                    if lo == hi {
                        continue;
                    }
                    let x0 = lo * g.stride + j - g.pad_w;
                    for (k, v) in s[lo..hi].iter().enumerate() {
                        dst[x0 + k * g.stride] += v;
                    }
                }
            }
        }
    }
}

/// `c[m, n] = beta * c + a[m, k] * b[k, n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    if m * k * n <= SMALL_GEMM {
        small_gemm(m, k, n, a, (rsa, csa), b, (rsb, csb), beta, c, (rsc, csc));
        return;
    }
    // SAFETY: the asserted extents keep every strided access inside the slices.
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
            rsc as isize,
            csc as isize,
        );
    }
}

/// Products at or below this many multiply-adds skip the packed kernel,
/// whose per-call buffer setup dominates at these sizes.
const SMALL_GEMM: usize = 1 << 15;

#[allow(clippy::too_many_arguments)]
fn small_gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    for i in 0..m {
        for j in 0..n {
            let cij = &mut c[i * rsc + j * csc];
            *cij = if beta == 0.0 { 0.0 } else { beta * *cij };
        }
        for p in 0..k {
            let aip = a[i * rsa + p * csa];
            if csb == 1 && csc == 1 {
                let brow = &b[p * rsb..p * rsb + n];
                let crow = &mut c[i * rsc..i * rsc + n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += aip * bv;
                }
            } else {
                for j in 0..n {
                    c[i * rsc + j * csc] += aip * b[p * rsb + j * csb];
                }
            }
        }
    }
}

/// Row-major `[m, k] x [k, n]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, (k, 1), b, (n, 1), 0.0, &mut c, (n, 1));
    c
}

const OUTSIDE: usize = usize::MAX;

/// For every (patch row, output pixel) of one sample, the input offset it
/// reads, or `OUTSIDE` for padding.
fn patch_table(g: &ConvGeom) -> Vec<usize> {
    let plane_out = g.ho * g.wo;
    let mut table = vec![OUTSIDE; g.ck() * plane_out];
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                for oy in 0..g.ho {
                    let Some(iy) = (oy * g.stride + i).checked_sub(g.pad_h).filter(|&v| v < g.h) else { continue };
                    for ox in 0..g.wo {
                        if let Some(ix) = (ox * g.stride + j).checked_sub(g.pad_w).filter(|&v| v < g.w) {
                            table[row * plane_out + oy * g.wo + ox] = (c * g.h + iy) * g.w + ix;
                        }
                    }
                }
            }
        }
    }
    table
}

fn im2col_table(table: &[usize], plane_out: usize, x: &[f64], cols: &mut [f64], ld: usize, off: usize) {
    for (r, t) in table.chunks_exact(plane_out).enumerate() {
        for (dst, &idx) in cols[r * ld + off..r * ld + off + plane_out].iter_mut().zip(t) {
            *dst = if idx == OUTSIDE { 0.0 } else { x[idx] };
        }
    }
}

fn col2im_table(table: &[usize], plane_out: usize, cols: &[f64], ld: usize, off: usize, x: &mut [f64]) {
    for (r, t) in table.chunks_exact(plane_out).enumerate() {
        for (&v, &idx) in cols[r * ld + off..r * ld + off + plane_out].iter().zip(t) {
            if idx != OUTSIDE {
                x[idx] += v;
            }
        }
    }
}

/// Samples per im2col group when whole images fit the column budget, else `None`.
fn group_size(g: &ConvGeom) -> Option<usize> {
    let per_sample = g.ck() * g.ho * g.wo;
    (per_sample <= COL_BUDGET).then(|| (COL_BUDGET / per_sample.max(1)).clamp(1, g.n.max(1)))
}

fn groups(n: usize, gs: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).step_by(gs).map(move |s| (s, (s + gs).min(n)))
}

pub(crate) fn conv_forward(g: &ConvGeom, x: &[f64], kernel: &[f64]) -> Vec<f64> {
    let (ck, plane_out, plane_in) = (g.ck(), g.ho * g.wo, g.c * g.h * g.w);
    let mut out = vec![0.0; g.n * g.o * plane_out];
    if let Some(gs) = group_size(g) {
        let table = patch_table(g);
        let mut cols = vec![0.0; ck * gs * plane_out];
        let mut tmp = vec![0.0; g.o * gs * plane_out];
        for (s0, s1) in groups(g.n, gs) {
            let ld = (s1 - s0) * plane_out;
            for s in s0..s1 {
                im2col_table(
                    &table,
                    plane_out,
                    &x[s * plane_in..(s + 1) * plane_in],
                    &mut cols,
                    ld,
                    (s - s0) * plane_out,
                );
            }
            gemm(g.o, ck, ld, kernel, (ck, 1), &cols[..ck * ld], (ld, 1), 0.0, &mut tmp[..g.o * ld], (ld, 1));
            for s in s0..s1 {
                for o in 0..g.o {
                    let src = &tmp[o * ld + (s - s0) * plane_out..][..plane_out];
                    out[(s * g.o + o) * plane_out..][..plane_out].copy_from_slice(src);
                }
            }
        }
        return out;
    }
    let mut cols = vec![0.0; ck * g.band_rows() * g.wo];
    for n in 0..g.n {
        let xn = &x[n * plane_in..(n + 1) * plane_in];
        let on = &mut out[n * g.o * plane_out..(n + 1) * g.o * plane_out];
        for (r0, r1) in g.bands() {
            let p = (r1 - r0) * g.wo;
            im2col(g, xn, r0, r1, &mut cols, p, 0);
            gemm(g.o, ck, p, kernel, (ck, 1), &cols[..ck * p], (p, 1), 0.0, &mut on[r0 * g.wo..], (plane_out, 1));
        }
    }
    out
}

/// Copies samples `s0..s1` of `[n, o, plane]` into an `[o, (s1 - s0) * plane]` matrix.
fn gather_channels_major(src: &[f64], o: usize, plane: usize, s0: usize, s1: usize, dst: &mut [f64]) {
    let ld = (s1 - s0) * plane;
    for s in s0..s1 {
        for c in 0..o {
            dst[c * ld + (s - s0) * plane..][..plane].copy_from_slice(&src[(s * o + c) * plane..][..plane]);
        }
    }
}

/// Gradient of the convolution with respect to its input, given the output
/// gradient `grad_out` (`[n, o, ho, wo]`).
pub(crate) fn conv_input_grad(g: &ConvGeom, grad_out: &[f64], kernel: &[f64]) -> Vec<f64> {
    let (ck, plane_out, plane_in) = (g.ck(), g.ho * g.wo, g.c * g.h * g.w);
    let mut dx = vec![0.0; g.n * plane_in];
    if let Some(gs) = group_size(g) {
        let table = patch_table(g);
        let mut cols = vec![0.0; ck * gs * plane_out];
        let mut gm = vec![0.0; g.o * gs * plane_out];
        for (s0, s1) in groups(g.n, gs) {
            let ld = (s1 - s0) * plane_out;
            gather_channels_major(grad_out, g.o, plane_out, s0, s1, &mut gm);
            gemm(ck, g.o, ld, kernel, (1, ck), &gm[..g.o * ld], (ld, 1), 0.0, &mut cols[..ck * ld], (ld, 1));
            for s in s0..s1 {
                col2im_table(
                    &table,
                    plane_out,
                    &cols[..ck * ld],
                    ld,
                    (s - s0) * plane_out,
                    &mut dx[s * plane_in..(s + 1) * plane_in],
                );
            }
        }
        return dx;
    }
    let mut cols = vec![0.0; ck * g.band_rows() * g.wo];
    for n in 0..g.n {
        let gn = &grad_out[n * g.o * plane_out..(n + 1) * g.o * plane_out];
        let dxn = &mut dx[n * plane_in..(n + 1) * plane_in];
        for (r0, r1) in g.bands() {
            let p = (r1 - r0) * g.wo;
            gemm(ck, g.o, p, kernel, (1, ck), &gn[r0 * g.wo..], (plane_out, 1), 0.0, &mut cols[..ck * p], (p, 1));
            col2im(g, &cols[..ck * p], r0, r1, dxn, p, 0);
        }
    }
    dx
}

/// Gradient of the convolution with respect to its kernel.
pub(crate) fn conv_weight_grad(g: &ConvGeom, x: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let (ck, plane_out, plane_in) = (g.ck(), g.ho * g.wo, g.c * g.h * g.w);
    let mut dw = vec![0.0; g.o * ck];
    if let Some(gs) = group_size(g) {
        let table = patch_table(g);
        let mut cols = vec![0.0; ck * gs * plane_out];
        let mut gm = vec![0.0; g.o * gs * plane_out];
        for (s0, s1) in groups(g.n, gs) {
            let ld = (s1 - s0) * plane_out;
            for s in s0..s1 {
                im2col_table(
                    &table,
                    plane_out,
                    &x[s * plane_in..(s + 1) * plane_in],
                    &mut cols,
                    ld,
                    (s - s0) * plane_out,
                );
            }
            gather_channels_major(grad_out, g.o, plane_out, s0, s1, &mut gm);
            gemm(g.o, ld, ck, &gm[..g.o * ld], (ld, 1), &cols[..ck * ld], (1, ld), 1.0, &mut dw, (ck, 1));
        }
        return dw;
    }
    let mut cols = vec![0.0; ck * g.band_rows() * g.wo];
    for n in 0..g.n {
        let xn = &x[n * plane_in..(n + 1) * plane_in];
        let gn = &grad_out[n * g.o * plane_out..(n + 1) * g.o * plane_out];
        for (r0, r1) in g.bands() {
            let p = (r1 - r0) * g.wo;
            im2col(g, xn, r0, r1, &mut cols, p, 0);
            gemm(g.o, p, ck, &gn[r0 * g.wo..], (plane_out, 1), &cols[..ck * p], (1, p), 1.0, &mut dw, (ck, 1));
        }
    }
    dw
}

/// Flat input index of the maximum in each 2x2 window (stride 2, trailing
/// odd row/column dropped). Ties resolve to the first element in scan order.
pub(crate) fn max_pool2_indices(shape: &[usize], x: &[f64]) -> Result<(Vec<usize>, Vec<usize>)> {
    if shape.len() != 4 {
        return Err(Error::shape("max_pool2", format!("need 4-D input, got {shape:?}")));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    if ho == 0 || wo == 0 {
        return Err(Error::shape("max_pool2", format!("spatial size {h}x{w} too small")));
    }
    let mut idx = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                idx.push(best);
            }
        }
    }
    Ok((idx, vec![n, c, ho, wo]))
}
