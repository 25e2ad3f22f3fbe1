//! f64 re-implementations of the network operations, used as the ground
//! truth inside finite-difference gradient checks. Running the mirror in f64
//! keeps the difference quotient noise orders of magnitude below the
//! tolerance being asserted.

#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    wts: &[f64],
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0f64; n * f * oh * ow];
    for img in 0..n {
        for fo in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for ci in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += wts[((fo * c + ci) * kh + ki) * kw + kj]
                                    * x[((img * c + ci) * h + iy as usize) * w + ix as usize];
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

pub fn maxpool2d(x: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f64; n * c * oh * ow];
    for img in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            best = best.max(x[((img * c + ch) * h + 2 * oy + dy) * w + 2 * ox + dx]);
                        }
                    }
                    out[((img * c + ch) * oh + oy) * ow + ox] = best;
                }
            }
        }
    }
    out
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn sigmoid(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| if v >= 0.0 { 1.0 / (1.0 + (-v).exp()) } else { v.exp() / (1.0 + v.exp()) })
        .collect()
}

pub fn batchnorm_train(
    x: &[f64],
    n: usize,
    c: usize,
    hw: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Vec<f64> {
    let m = (n * hw) as f64;
    let mut out = vec![0.0f64; x.len()];
    for ch in 0..c {
        let mut mean = 0.0;
        for img in 0..n {
            for i in 0..hw {
                mean += x[(img * c + ch) * hw + i];
            }
        }
        mean /= m;
        let mut var = 0.0;
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

#[allow(clippy::too_many_arguments)]
pub fn batchnorm_eval(
    x: &[f64],
    n: usize,
    c: usize,
    hw: usize,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Vec<f64> {
    let mut out = vec![0.0f64; x.len()];
    for img in 0..n {
        for ch in 0..c {
            let inv_std = 1.0 / (running_var[ch] + eps).sqrt();
            for i in 0..hw {
                let at = (img * c + ch) * hw + i;
                out[at] = gamma[ch] * ((x[at] - running_mean[ch]) * inv_std) + beta[ch];
            }
        }
    }
    out
}

pub fn dense(
    x: &[f64],
    n: usize,
    din: usize,
    w: &[f64],
    dout: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let mut out = vec![0.0f64; n * dout];
    for row in 0..n {
        for d in 0..dout {
            let mut acc = 0.0;
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

/// Mean negative log-softmax at the labels.
pub fn softmax_ce(logits: &[f64], n: usize, k: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for row in 0..n {
        let lr = &logits[row * k..][..k];
        let mx = lr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = lr.iter().map(|&v| (v - mx).exp()).sum();
        total += denom.ln() - (lr[labels[row]] - mx);
    }
    total / n as f64
}

pub fn proto_distance(
    z: &[f64],
    n: usize,
    d: usize,
    cells: usize,
    p: &[f64],
    pcount: usize,
) -> Vec<f64> {
    let mut out = vec![0.0f64; n * pcount * cells];
    for img in 0..n {
        for pi in 0..pcount {
            for cell in 0..cells {
                let mut acc = 0.0;
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

pub fn log_similarity(dist: &[f64], eps: f64) -> Vec<f64> {
    dist.iter().map(|&d| (d + 1.0).ln() - (d + eps).ln()).collect()
}

pub fn spatial_max(x: &[f64], groups: usize, cells: usize) -> Vec<f64> {
    (0..groups)
        .map(|g| x[g * cells..(g + 1) * cells].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Mean over images of the minimum distance to an own-class (`own`) or
/// other-class (`!own`) prototype.
pub fn min_class_distance(
    dist: &[f64],
    n: usize,
    pcount: usize,
    cells: usize,
    labels: &[usize],
    class_of: &[usize],
    own: bool,
) -> f64 {
    let mut total = 0.0;
    for img in 0..n {
        let mut best = f64::INFINITY;
        for (pi, &pc) in class_of.iter().enumerate() {
            if (pc == labels[img]) != own {
                continue;
            }
            for cell in 0..cells {
                best = best.min(dist[(img * pcount + pi) * cells + cell]);
            }
        }
        total += best;
    }
    total / n as f64
}

pub fn global_avg_pool(x: &[f64], groups: usize, hw: usize) -> Vec<f64> {
    (0..groups).map(|g| x[g * hw..(g + 1) * hw].iter().sum::<f64>() / hw as f64).collect()
}

pub fn l1_masked(w: &[f64], mask: &[f64]) -> f64 {
    w.iter().zip(mask).map(|(&v, &m)| m * v.abs()).sum()
}
