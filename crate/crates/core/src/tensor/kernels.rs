//! Raw forward/backward compute kernels on flat f32 slices.
//!
//! Accumulation order is part of the contract: every output element of
//! conv/dense/distance sums its contributions in ascending reduction-index
//! order, matching the naive nested-loop definition bit for bit. The GEMM
//! below vectorizes across output columns only, never across the reduction
//! axis, so that order is preserved.

use crate::error::{Error, Result};

// ── GEMM ─────────────────────────────────────────────────────────────

const GEMM_TILE: usize = 64;

/// c[m×n] += a[m×k] · b[k×n], row-major. Per output element the sum over k
/// runs in ascending k order.
pub(crate) fn gemm_accum(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        let mut j0 = 0;
        while j0 < n {
            let jw = GEMM_TILE.min(n - j0);
            let mut acc = [0.0f32; GEMM_TILE];
            let acc = &mut acc[..jw];
            for (kk, &av) in a_row.iter().enumerate() {
                let b_seg = &b[kk * n + j0..kk * n + j0 + jw];
                for (ac, &bv) in acc.iter_mut().zip(b_seg) {
                    *ac += av * bv;
                }
            }
            for (cv, &ac) in c_row[j0..j0 + jw].iter_mut().zip(acc.iter()) {
                *cv += ac;
            }
            j0 += jw;
        }
    }
}

/// out[c×r] = transpose of src[r×c].
pub(crate) fn transpose(src: &[f32], rows: usize, cols: usize, out: &mut [f32]) {
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
}

// ── Convolution ──────────────────────────────────────────────────────

/// Resolved shapes for one conv2d application.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvDims {
    pub fn resolve(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x_shape.len() != 4 || w_shape.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected 4-d input and kernel, got {x_shape:?} and {w_shape:?}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (f, kc, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        if kc != c {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {kc} input channels, input has {c}"),
            ));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        let out_h = (h + 2 * pad - kh) / stride + 1;
        let out_w = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvDims { n, c, h, w, f, kh, kw, stride, pad, out_h, out_w })
    }

    pub fn cols_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn cols_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold one image (c×h×w) into the patch matrix (c·kh·kw) × (out_h·out_w),
/// zero-filling out-of-range taps.
pub(crate) fn im2col(img: &[f32], d: &ConvDims, cols: &mut [f32]) {
    let l = d.cols_len();
    debug_assert_eq!(cols.len(), d.cols_rows() * l);
    for c in 0..d.c {
        let plane = &img[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = &mut cols[((c * d.kh + ki) * d.kw + kj) * l..][..l];
                for oy in 0..d.out_h {
                    let iy = (oy * d.stride + ki) as isize - d.pad as isize;
                    let seg = &mut row[oy * d.out_w..][..d.out_w];
                    if iy < 0 || iy >= d.h as isize {
                        seg.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * d.w..][..d.w];
                    if d.stride == 1 {
                        // ix = ox + kj - pad for ox in 0..out_w
                        let shift = kj as isize - d.pad as isize;
                        let ox_lo = (-shift).max(0) as usize;
                        let ox_hi = ((d.w as isize - shift).clamp(0, d.out_w as isize)) as usize;
                        seg[..ox_lo.min(d.out_w)].fill(0.0);
                        if ox_hi > ox_lo {
                            let src_lo = (ox_lo as isize + shift) as usize;
                            seg[ox_lo..ox_hi].copy_from_slice(&src_row[src_lo..src_lo + (ox_hi - ox_lo)]);
                        }
                        seg[ox_hi.max(ox_lo)..].fill(0.0);
                    } else {
                        for (ox, s) in seg.iter_mut().enumerate() {
                            let ix = (ox * d.stride + kj) as isize - d.pad as isize;
                            *s = if ix < 0 || ix >= d.w as isize {
                                0.0
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Fold the patch-matrix gradient back onto the input image (scatter-add).
fn col2im_add(dcols: &[f32], d: &ConvDims, dimg: &mut [f32]) {
    let l = d.cols_len();
    for c in 0..d.c {
        let plane = &mut dimg[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = &dcols[((c * d.kh + ki) * d.kw + kj) * l..][..l];
                for oy in 0..d.out_h {
                    let iy = (oy * d.stride + ki) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * d.w..][..d.w];
                    let seg = &row[oy * d.out_w..][..d.out_w];
                    if d.stride == 1 {
                        let shift = kj as isize - d.pad as isize;
                        let ox_lo = (-shift).max(0) as usize;
                        let ox_hi = ((d.w as isize - shift).clamp(0, d.out_w as isize)) as usize;
                        if ox_hi > ox_lo {
                            let src_lo = (ox_lo as isize + shift) as usize;
                            for (dst, &g) in dst_row[src_lo..src_lo + (ox_hi - ox_lo)]
                                .iter_mut()
                                .zip(&seg[ox_lo..ox_hi])
                            {
                                *dst += g;
                            }
                        }
                    } else {
                        for (ox, &g) in seg.iter().enumerate() {
                            let ix = (ox * d.stride + kj) as isize - d.pad as isize;
                            if ix >= 0 && ix < d.w as isize {
                                dst_row[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f32], w: &[f32], d: &ConvDims) -> Vec<f32> {
    let l = d.cols_len();
    let k = d.cols_rows();
    let mut out = vec![0.0f32; d.n * d.f * l];
    let mut cols = vec![0.0f32; k * l];
    for img in 0..d.n {
        im2col(&x[img * d.c * d.h * d.w..][..d.c * d.h * d.w], d, &mut cols);
        gemm_accum(w, &cols, &mut out[img * d.f * l..][..d.f * l], d.f, k, l);
    }
    out
}

/// Gradients for conv2d, accumulated (+=) into the provided buffers.
/// Recomputes im2col from the saved input instead of caching it, trading a
/// little compute for a lot of tape memory.
pub(crate) fn conv2d_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    d: &ConvDims,
    mut dx: Option<&mut [f32]>,
    mut dw: Option<&mut [f32]>,
) {
    let l = d.cols_len();
    let k = d.cols_rows();
    let mut cols = vec![0.0f32; k * l];
    let mut cols_t = vec![0.0f32; k * l];
    let mut dcols = vec![0.0f32; k * l];
    let mut w_t = Vec::new();
    if dx.is_some() {
        w_t = vec![0.0f32; d.f * k];
        transpose(w, d.f, k, &mut w_t);
    }
    for img in 0..d.n {
        let dy_img = &dy[img * d.f * l..][..d.f * l];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[img * d.c * d.h * d.w..][..d.c * d.h * d.w], d, &mut cols);
            transpose(&cols, k, l, &mut cols_t);
            gemm_accum(dy_img, &cols_t, dw, d.f, l, k);
        }
        if let Some(dx) = dx.as_mut() {
            dcols.fill(0.0);
            gemm_accum(&w_t, dy_img, &mut dcols, k, d.f, l);
            col2im_add(&dcols, d, &mut dx[img * d.c * d.h * d.w..][..d.c * d.h * d.w]);
        }
    }
}

// ── Pooling ──────────────────────────────────────────────────────────

/// 2×2 stride-2 max pooling. `argmax` records, per output element, the flat
/// index into `x` of the winning tap; ties keep the first in row-major scan.
pub(crate) fn maxpool2d_forward(
    x: &[f32],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    out: &mut [f32],
    argmax: &mut [u32],
) {
    let (oh, ow) = (h / 2, w / 2);
    for img in 0..n {
        for ch in 0..c {
            let plane_base = (img * c + ch) * h * w;
            let out_base = (img * c + ch) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_at = 0u32;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let at = plane_base + (2 * oy + dy) * w + (2 * ox + dx);
                            let v = x[at];
                            if v > best {
                                best = v;
                                best_at = at as u32;
                            }
                        }
                    }
                    out[out_base + oy * ow + ox] = best;
                    argmax[out_base + oy * ow + ox] = best_at;
                }
            }
        }
    }
}

pub(crate) fn maxpool2d_backward(dy: &[f32], argmax: &[u32], dx: &mut [f32]) {
    for (&g, &at) in dy.iter().zip(argmax) {
        dx[at as usize] += g;
    }
}

// ── Batch normalization ──────────────────────────────────────────────

/// Per-channel biased mean/variance over the n,h,w axes. Two-pass, so the
/// result does not depend on catastrophic cancellation of a single pass.
pub(crate) fn bn_batch_stats(
    x: &[f32],
    n: usize,
    c: usize,
    hw: usize,
    mean: &mut [f32],
    var: &mut [f32],
) {
    let m = (n * hw) as f32;
    for ch in 0..c {
        let mut s = 0.0f32;
        for img in 0..n {
            let seg = &x[(img * c + ch) * hw..][..hw];
            for &v in seg {
                s += v;
            }
        }
        mean[ch] = s / m;
    }
    for ch in 0..c {
        let mu = mean[ch];
        let mut s = 0.0f32;
        for img in 0..n {
            let seg = &x[(img * c + ch) * hw..][..hw];
            for &v in seg {
                let d = v - mu;
                s += d * d;
            }
        }
        var[ch] = s / m;
    }
}

pub(crate) fn bn_normalize(
    x: &[f32],
    n: usize,
    c: usize,
    hw: usize,
    mean: &[f32],
    inv_std: &[f32],
    gamma: &[f32],
    beta: &[f32],
    out: &mut [f32],
) {
    for img in 0..n {
        for ch in 0..c {
            let (mu, is, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            let src = &x[(img * c + ch) * hw..][..hw];
            let dst = &mut out[(img * c + ch) * hw..][..hw];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = g * ((v - mu) * is) + b;
            }
        }
    }
}

/// Train-mode batchnorm backward; the batch statistics are functions of x,
/// which is what distinguishes this from the eval-mode rule.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_backward_train(
    x: &[f32],
    dy: &[f32],
    n: usize,
    c: usize,
    hw: usize,
    mean: &[f32],
    inv_std: &[f32],
    gamma: &[f32],
    dx: Option<&mut [f32]>,
    dgamma: Option<&mut [f32]>,
    dbeta: Option<&mut [f32]>,
) {
    let m = (n * hw) as f32;
    let mut sum_dy = vec![0.0f32; c];
    let mut sum_dy_xhat = vec![0.0f32; c];
    for ch in 0..c {
        let (mu, is) = (mean[ch], inv_std[ch]);
        let mut a = 0.0f32;
        let mut b = 0.0f32;
        for img in 0..n {
            let xs = &x[(img * c + ch) * hw..][..hw];
            let gs = &dy[(img * c + ch) * hw..][..hw];
            for (&xv, &gv) in xs.iter().zip(gs) {
                a += gv;
                b += gv * (xv - mu) * is;
            }
        }
        sum_dy[ch] = a;
        sum_dy_xhat[ch] = b;
    }
    if let Some(dx) = dx {
        for img in 0..n {
            for ch in 0..c {
                let (mu, is, g) = (mean[ch], inv_std[ch], gamma[ch]);
                let (sd, sdx) = (sum_dy[ch], sum_dy_xhat[ch]);
                let xs = &x[(img * c + ch) * hw..][..hw];
                let gs = &dy[(img * c + ch) * hw..][..hw];
                let ds = &mut dx[(img * c + ch) * hw..][..hw];
                for ((d, &xv), &gv) in ds.iter_mut().zip(xs).zip(gs) {
                    let xhat = (xv - mu) * is;
                    *d += g * is * (gv - sd / m - xhat * sdx / m);
                }
            }
        }
    }
    if let Some(dgamma) = dgamma {
        for ch in 0..c {
            dgamma[ch] += sum_dy_xhat[ch];
        }
    }
    if let Some(dbeta) = dbeta {
        for ch in 0..c {
            dbeta[ch] += sum_dy[ch];
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_backward_eval(
    x: &[f32],
    dy: &[f32],
    n: usize,
    c: usize,
    hw: usize,
    mean: &[f32],
    inv_std: &[f32],
    gamma: &[f32],
    dx: Option<&mut [f32]>,
    dgamma: Option<&mut [f32]>,
    dbeta: Option<&mut [f32]>,
) {
    if let Some(dx) = dx {
        for img in 0..n {
            for ch in 0..c {
                let k = gamma[ch] * inv_std[ch];
                let gs = &dy[(img * c + ch) * hw..][..hw];
                let ds = &mut dx[(img * c + ch) * hw..][..hw];
                for (d, &gv) in ds.iter_mut().zip(gs) {
                    *d += k * gv;
                }
            }
        }
    }
    if dgamma.is_some() || dbeta.is_some() {
        let mut sum_dy = vec![0.0f32; c];
        let mut sum_dy_xhat = vec![0.0f32; c];
        for ch in 0..c {
            let (mu, is) = (mean[ch], inv_std[ch]);
            for img in 0..n {
                let xs = &x[(img * c + ch) * hw..][..hw];
                let gs = &dy[(img * c + ch) * hw..][..hw];
                for (&xv, &gv) in xs.iter().zip(gs) {
                    sum_dy[ch] += gv;
                    sum_dy_xhat[ch] += gv * (xv - mu) * is;
                }
            }
        }
        if let Some(dgamma) = dgamma {
            for ch in 0..c {
                dgamma[ch] += sum_dy_xhat[ch];
            }
        }
        if let Some(dbeta) = dbeta {
            for ch in 0..c {
                dbeta[ch] += sum_dy[ch];
            }
        }
    }
}

// ── Dense ────────────────────────────────────────────────────────────

pub(crate) fn dense_forward(
    x: &[f32],
    w: &[f32],
    bias: Option<&[f32]>,
    n: usize,
    din: usize,
    dout: usize,
    out: &mut [f32],
) {
    for row in 0..n {
        let xr = &x[row * din..][..din];
        for d in 0..dout {
            let wr = &w[d * din..][..din];
            let mut s = 0.0f32;
            for (&a, &b) in xr.iter().zip(wr) {
                s += a * b;
            }
            if let Some(b) = bias {
                s += b[d];
            }
            out[row * dout + d] = s;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    n: usize,
    din: usize,
    dout: usize,
    dx: Option<&mut [f32]>,
    dw: Option<&mut [f32]>,
    dbias: Option<&mut [f32]>,
) {
    if let Some(dx) = dx {
        for row in 0..n {
            let dxr = &mut dx[row * din..][..din];
            for d in 0..dout {
                let g = dy[row * dout + d];
                let wr = &w[d * din..][..din];
                for (o, &wv) in dxr.iter_mut().zip(wr) {
                    *o += g * wv;
                }
            }
        }
    }
    if let Some(dw) = dw {
        for row in 0..n {
            let xr = &x[row * din..][..din];
            for d in 0..dout {
                let g = dy[row * dout + d];
                let dwr = &mut dw[d * din..][..din];
                for (o, &xv) in dwr.iter_mut().zip(xr) {
                    *o += g * xv;
                }
            }
        }
    }
    if let Some(dbias) = dbias {
        for row in 0..n {
            for d in 0..dout {
                dbias[d] += dy[row * dout + d];
            }
        }
    }
}

// ── Softmax cross-entropy ────────────────────────────────────────────

/// Mean negative log-softmax at the label, stabilized by max subtraction.
/// Returns the loss and keeps the softmax probabilities for backward.
pub(crate) fn softmax_ce_forward(
    logits: &[f32],
    n: usize,
    k: usize,
    labels: &[usize],
    probs: &mut [f32],
) -> f32 {
    let mut total = 0.0f32;
    for row in 0..n {
        let lr = &logits[row * k..][..k];
        let pr = &mut probs[row * k..][..k];
        let mut mx = f32::NEG_INFINITY;
        for &v in lr {
            if v > mx {
                mx = v;
            }
        }
        let mut denom = 0.0f32;
        for (p, &v) in pr.iter_mut().zip(lr) {
            let e = (v - mx).exp();
            *p = e;
            denom += e;
        }
        for p in pr.iter_mut() {
            *p /= denom;
        }
        total += denom.ln() - (lr[labels[row]] - mx);
    }
    total / n as f32
}

pub(crate) fn softmax_ce_backward(
    probs: &[f32],
    n: usize,
    k: usize,
    labels: &[usize],
    upstream: f32,
    dlogits: &mut [f32],
) {
    let scale = upstream / n as f32;
    for row in 0..n {
        let pr = &probs[row * k..][..k];
        let dr = &mut dlogits[row * k..][..k];
        for (cls, (d, &p)) in dr.iter_mut().zip(pr).enumerate() {
            let onehot = if cls == labels[row] { 1.0 } else { 0.0 };
            *d += scale * (p - onehot);
        }
    }
}

// ── Prototype distances ──────────────────────────────────────────────

/// Squared L2 distance between every latent cell and every prototype.
/// z: n×d×cells (channel-major), p: pcount×d, out: n×pcount×cells.
/// The inner sum runs over latent coordinates in ascending order.
pub(crate) fn proto_distance_forward(
    z: &[f32],
    n: usize,
    d: usize,
    cells: usize,
    p: &[f32],
    pcount: usize,
    out: &mut [f32],
) {
    let mut zc = vec![0.0f32; cells * d];
    for img in 0..n {
        let zi = &z[img * d * cells..][..d * cells];
        for ch in 0..d {
            for cell in 0..cells {
                zc[cell * d + ch] = zi[ch * cells + cell];
            }
        }
        for pi in 0..pcount {
            let pv = &p[pi * d..][..d];
            let orow = &mut out[(img * pcount + pi) * cells..][..cells];
            for (cell, o) in orow.iter_mut().enumerate() {
                let zr = &zc[cell * d..][..d];
                let mut s = 0.0f32;
                for (&zv, &pvv) in zr.iter().zip(pv) {
                    let diff = zv - pvv;
                    s += diff * diff;
                }
                *o = s;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn proto_distance_backward(
    z: &[f32],
    n: usize,
    d: usize,
    cells: usize,
    p: &[f32],
    pcount: usize,
    ddist: &[f32],
    dz: Option<&mut [f32]>,
    dp: Option<&mut [f32]>,
) {
    let mut zc = vec![0.0f32; cells * d];
    let mut dzc = vec![0.0f32; cells * d];
    let want_dz = dz.is_some();
    let mut dz = dz;
    let mut dp = dp;
    for img in 0..n {
        let zi = &z[img * d * cells..][..d * cells];
        for ch in 0..d {
            for cell in 0..cells {
                zc[cell * d + ch] = zi[ch * cells + cell];
            }
        }
        dzc.fill(0.0);
        for pi in 0..pcount {
            let pv = &p[pi * d..][..d];
            let grow = &ddist[(img * pcount + pi) * cells..][..cells];
            for (cell, &g) in grow.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let g2 = 2.0 * g;
                let zr = &zc[cell * d..][..d];
                if let Some(dp) = dp.as_mut() {
                    let dpr = &mut dp[pi * d..][..d];
                    if want_dz {
                        let dzr = &mut dzc[cell * d..][..d];
                        for i in 0..d {
                            let t = g2 * (zr[i] - pv[i]);
                            dzr[i] += t;
                            dpr[i] -= t;
                        }
                    } else {
                        for i in 0..d {
                            dpr[i] -= g2 * (zr[i] - pv[i]);
                        }
                    }
                } else if want_dz {
                    let dzr = &mut dzc[cell * d..][..d];
                    for i in 0..d {
                        dzr[i] += g2 * (zr[i] - pv[i]);
                    }
                }
            }
        }
        if let Some(dz) = dz.as_mut() {
            let di = &mut dz[img * d * cells..][..d * cells];
            for ch in 0..d {
                for cell in 0..cells {
                    di[ch * cells + cell] += dzc[cell * d + ch];
                }
            }
        }
    }
}

// ── Misc elementwise / reductions ────────────────────────────────────

pub(crate) fn spatial_max_forward(
    x: &[f32],
    groups: usize,
    cells: usize,
    out: &mut [f32],
    argmax: &mut [u32],
) {
    for g in 0..groups {
        let row = &x[g * cells..][..cells];
        let mut best = f32::NEG_INFINITY;
        let mut at = 0u32;
        for (i, &v) in row.iter().enumerate() {
            if v > best {
                best = v;
                at = i as u32;
            }
        }
        out[g] = best;
        argmax[g] = at;
    }
}

/// Mean over images of the minimum distance to a class-matched prototype.
/// `own` selects prototypes of the image's class; `!own` the complement.
/// Returns (value, per-image argmin as flat p*cells+cell index).
pub(crate) fn min_class_distance_forward(
    dist: &[f32],
    n: usize,
    pcount: usize,
    cells: usize,
    labels: &[usize],
    class_of: &[usize],
    own: bool,
) -> (f32, Vec<u32>) {
    let mut total = 0.0f32;
    let mut argmin = vec![0u32; n];
    for img in 0..n {
        let mut best = f32::INFINITY;
        let mut at = 0u32;
        for (pi, &pc) in class_of.iter().enumerate() {
            if (pc == labels[img]) != own {
                continue;
            }
            let row = &dist[(img * pcount + pi) * cells..][..cells];
            for (cell, &v) in row.iter().enumerate() {
                if v < best {
                    best = v;
                    at = (pi * cells + cell) as u32;
                }
            }
        }
        total += best;
        argmin[img] = at;
    }
    (total / n as f32, argmin)
}

pub(crate) fn global_avg_pool_forward(x: &[f32], groups: usize, hw: usize, out: &mut [f32]) {
    for g in 0..groups {
        let row = &x[g * hw..][..hw];
        let mut s = 0.0f32;
        for &v in row {
            s += v;
        }
        out[g] = s / hw as f32;
    }
}

pub(crate) fn stable_sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_gemm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f32;
                for kk in 0..k {
                    s += a[i * k + kk] * b[kk * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_bitwise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for &(m, k, n) in &[(3, 5, 7), (4, 288, 130), (1, 1, 1), (8, 16, 64)] {
            let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut c = vec![0.0f32; m * n];
            gemm_accum(&a, &b, &mut c, m, k, n);
            assert_eq!(c, naive_gemm(&a, &b, m, k, n));
        }
    }

    #[test]
    fn im2col_stride2_padded() {
        // 1 channel 3x3 image, 2x2 kernel, stride 2, pad 1 -> out 2x2
        let d = ConvDims::resolve(&[1, 1, 3, 3], &[1, 1, 2, 2], 2, 1).unwrap();
        assert_eq!((d.out_h, d.out_w), (2, 2));
        let img: Vec<f32> = (1..=9).map(|v| v as f32).collect();
        let mut cols = vec![0.0f32; d.cols_rows() * d.cols_len()];
        im2col(&img, &d, &mut cols);
        // tap (ki=1,kj=1) at output (0,0) reads input (0,0) = 1
        assert_eq!(cols[3 * 4], 1.0);
        // tap (ki=0,kj=0) at output (0,0) is padding
        assert_eq!(cols[0], 0.0);
    }

    #[test]
    fn transpose_roundtrip() {
        let src: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let mut t = vec![0.0f32; 12];
        let mut back = vec![0.0f32; 12];
        transpose(&src, 3, 4, &mut t);
        transpose(&t, 4, 3, &mut back);
        assert_eq!(src, back);
    }
}
