//! Naive f32 references. Accumulation runs in the canonical nested-loop
//! order (channel, then kernel row, then kernel column; feature index
//! ascending), which the production kernels are required to match bit for
//! bit.

/// Plain six-loop convolution. Returns (output, out_h, out_w); out-of-range
/// taps are skipped, which is numerically identical to padding with zeros.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f32],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    wts: &[f32],
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f32>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0f32; n * f * oh * ow];
    for img in 0..n {
        for fo in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for ci in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((img * c + ci) * h + iy as usize) * w + ix as usize];
                                let wv = wts[((fo * c + ci) * kh + ki) * kw + kj];
                                acc += wv * xv;
                            }
                        }
                    }
                    out[((img * f + fo) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

/// 2×2 stride-2 max pooling, first tap wins ties in row-major scan order.
pub fn maxpool2d(x: &[f32], n: usize, c: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; n * c * oh * ow];
    for img in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let v = x[((img * c + ch) * h + 2 * oy + dy) * w + 2 * ox + dx];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out[((img * c + ch) * oh + oy) * ow + ox] = best;
                }
            }
        }
    }
    out
}

/// out[n][d] = Σ_i x[n][i]·w[d][i] + bias[d], inner index ascending.
pub fn dense(
    x: &[f32],
    n: usize,
    din: usize,
    w: &[f32],
    dout: usize,
    bias: Option<&[f32]>,
) -> Vec<f32> {
    let mut out = vec![0.0f32; n * dout];
    for row in 0..n {
        for d in 0..dout {
            let mut acc = 0.0f32;
            for i in 0..din {
                acc += x[row * din + i] * w[d * din + i];
            }
            if let Some(b) = bias {
                acc += b[d];
            }
            out[row * dout + d] = acc;
        }
    }
    out
}

/// Squared L2 distance from every latent cell to every prototype, summing
/// over latent channels in ascending order.
pub fn proto_distance(
    z: &[f32],
    n: usize,
    d: usize,
    gh: usize,
    gw: usize,
    p: &[f32],
    pcount: usize,
) -> Vec<f32> {
    let cells = gh * gw;
    let mut out = vec![0.0f32; n * pcount * cells];
    for img in 0..n {
        for pi in 0..pcount {
            for cell in 0..cells {
                let mut acc = 0.0f32;
                for ch in 0..d {
                    let diff = z[(img * d + ch) * cells + cell] - p[pi * d + ch];
                    acc += diff * diff;
                }
                out[(img * pcount + pi) * cells + cell] = acc;
            }
        }
    }
    out
}

/// Train-mode batch normalization: biased per-channel statistics over the
/// batch and spatial axes, two passes, sample order image-major.
pub fn batchnorm_train(
    x: &[f32],
    n: usize,
    c: usize,
    hw: usize,
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> Vec<f32> {
    let m = (n * hw) as f32;
    let mut out = vec![0.0f32; x.len()];
    for ch in 0..c {
        let mut mean = 0.0f32;
        for img in 0..n {
            for i in 0..hw {
                mean += x[(img * c + ch) * hw + i];
            }
        }
        mean /= m;
        let mut var = 0.0f32;
        for img in 0..n {
            for i in 0..hw {
                let d = x[(img * c + ch) * hw + i] - mean;
                var += d * d;
            }
        }
        var /= m;
        let inv_std = 1.0 / (var + eps).sqrt();
        for img in 0..n {
            for i in 0..hw {
                let at = (img * c + ch) * hw + i;
                out[at] = gamma[ch] * ((x[at] - mean) * inv_std) + beta[ch];
            }
        }
    }
    out
}
