//! Planar RGB images in [0,1] and the pixel-level operations the dataset
//! pipeline and perturbation descriptors are built from: flips, crops,
//! bilinear sampling with reflect padding, Gaussian blur, HSV adjustments,
//! and projective warps.

use crate::error::{Error, Result};

/// Planar RGB image: three channel planes of h×w f32 values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize) -> Self {
        Image { h, w, data: vec![0.0; 3 * h * w] }
    }

    pub fn from_planar(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::InvalidInput("image extents must be positive".into()));
        }
        if data.len() != 3 * h * w {
            return Err(Error::InvalidInput(format!(
                "planar buffer has {} values, expected {} for {h}x{w} RGB",
                data.len(),
                3 * h * w
            )));
        }
        Ok(Image { h, w, data })
    }

    /// Decode from interleaved 8-bit RGB rows (the PNG in-memory layout).
    pub fn from_rgb8(h: usize, w: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != 3 * h * w {
            return Err(Error::InvalidInput(format!(
                "rgb8 buffer has {} bytes, expected {} for {h}x{w}",
                rgb.len(),
                3 * h * w
            )));
        }
        let mut img = Image::new(h, w);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    img.data[c * h * w + y * w + x] = rgb[(y * w + x) * 3 + c] as f32 / 255.0;
                }
            }
        }
        Ok(img)
    }

    /// Encode to interleaved 8-bit RGB with round-to-nearest quantization.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = vec![0u8; 3 * self.h * self.w];
        for y in 0..self.h {
            for x in 0..self.w {
                for c in 0..3 {
                    let v = self.data[c * self.h * self.w + y * self.w + x];
                    out[(y * self.w + x) * 3 + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
        out
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[c * self.h * self.w + y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[c * self.h * self.w + y * self.w + x] = v;
    }

    pub fn hflip(&self) -> Image {
        let mut out = Image::new(self.h, self.w);
        for c in 0..3 {
            for y in 0..self.h {
                for x in 0..self.w {
                    out.set(c, y, x, self.get(c, y, self.w - 1 - x));
                }
            }
        }
        out
    }

    pub fn vflip(&self) -> Image {
        let mut out = Image::new(self.h, self.w);
        for c in 0..3 {
            for y in 0..self.h {
                for x in 0..self.w {
                    out.set(c, y, x, self.get(c, self.h - 1 - y, x));
                }
            }
        }
        out
    }

    pub fn crop(&self, y0: usize, x0: usize, ch: usize, cw: usize) -> Result<Image> {
        if y0 + ch > self.h || x0 + cw > self.w {
            return Err(Error::InvalidInput(format!(
                "crop {ch}x{cw} at ({y0},{x0}) exceeds {}x{} image",
                self.h, self.w
            )));
        }
        let mut out = Image::new(ch, cw);
        for c in 0..3 {
            for y in 0..ch {
                for x in 0..cw {
                    out.set(c, y, x, self.get(c, y0 + y, x0 + x));
                }
            }
        }
        Ok(out)
    }

    /// Bilinear sample with whole-sample reflection at the borders.
    pub fn bilinear_reflect(&self, c: usize, y: f32, x: f32) -> f32 {
        let y0 = y.floor();
        let x0 = x.floor();
        let fy = y - y0;
        let fx = x - x0;
        let (y0, x0) = (y0 as isize, x0 as isize);
        let p00 = self.get(c, reflect(y0, self.h), reflect(x0, self.w));
        let p01 = self.get(c, reflect(y0, self.h), reflect(x0 + 1, self.w));
        let p10 = self.get(c, reflect(y0 + 1, self.h), reflect(x0, self.w));
        let p11 = self.get(c, reflect(y0 + 1, self.h), reflect(x0 + 1, self.w));
        let top = p00 + fx * (p01 - p00);
        let bot = p10 + fx * (p11 - p10);
        top + fy * (bot - top)
    }

    /// Separable Gaussian blur with reflected edges.
    pub fn gaussian_blur(&self, sigma: f32, radius: usize) -> Image {
        assert!(sigma > 0.0, "blur sigma must be positive");
        let mut kernel = Vec::with_capacity(2 * radius + 1);
        for i in -(radius as isize)..=(radius as isize) {
            kernel.push((-(i * i) as f32 / (2.0 * sigma * sigma)).exp());
        }
        let norm: f32 = kernel.iter().sum();
        for k in kernel.iter_mut() {
            *k /= norm;
        }
        let mut horiz = Image::new(self.h, self.w);
        for c in 0..3 {
            for y in 0..self.h {
                for x in 0..self.w {
                    let mut acc = 0.0f32;
                    for (ki, &kv) in kernel.iter().enumerate() {
                        let sx = reflect(x as isize + ki as isize - radius as isize, self.w);
                        acc += kv * self.get(c, y, sx);
                    }
                    horiz.set(c, y, x, acc);
                }
            }
        }
        let mut out = Image::new(self.h, self.w);
        for c in 0..3 {
            for y in 0..self.h {
                for x in 0..self.w {
                    let mut acc = 0.0f32;
                    for (ki, &kv) in kernel.iter().enumerate() {
                        let sy = reflect(y as isize + ki as isize - radius as isize, self.h);
                        acc += kv * horiz.get(c, sy, x);
                    }
                    out.set(c, y, x, acc);
                }
            }
        }
        out
    }

    /// Rotate every pixel's hue by `degrees` on the HSV circle.
    pub fn shift_hue(&self, degrees: f32) -> Image {
        self.map_hsv(|(h, s, v)| ((h + degrees).rem_euclid(360.0), s, v))
    }

    /// Multiply every pixel's HSV saturation, clamped to [0,1].
    pub fn scale_saturation(&self, factor: f32) -> Image {
        self.map_hsv(|(h, s, v)| (h, (s * factor).clamp(0.0, 1.0), v))
    }

    /// Add a constant to every channel, clamped to [0,1].
    pub fn add_brightness(&self, delta: f32) -> Image {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            *v = (*v + delta).clamp(0.0, 1.0);
        }
        out
    }

    /// Scale each channel's deviation from its own mean, clamped to [0,1].
    pub fn scale_contrast(&self, factor: f32) -> Image {
        let mut out = self.clone();
        let plane = self.h * self.w;
        for c in 0..3 {
            let seg = &self.data[c * plane..(c + 1) * plane];
            let mean: f32 = seg.iter().sum::<f32>() / plane as f32;
            for (o, &v) in out.data[c * plane..(c + 1) * plane].iter_mut().zip(seg) {
                *o = (mean + factor * (v - mean)).clamp(0.0, 1.0);
            }
        }
        out
    }

    fn map_hsv(&self, f: impl Fn((f32, f32, f32)) -> (f32, f32, f32)) -> Image {
        let mut out = Image::new(self.h, self.w);
        let plane = self.h * self.w;
        for i in 0..plane {
            let rgb = (self.data[i], self.data[plane + i], self.data[2 * plane + i]);
            let (r, g, b) = hsv_to_rgb(f(rgb_to_hsv(rgb.0, rgb.1, rgb.2)));
            out.data[i] = r;
            out.data[plane + i] = g;
            out.data[2 * plane + i] = b;
        }
        out
    }

    /// Resample through the inverse map `inv` (output pixel → source point),
    /// bilinear with reflect padding.
    pub fn warp(&self, inv: &Homography) -> Image {
        let mut out = Image::new(self.h, self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                let (sx, sy) = inv.apply(x as f64, y as f64);
                for c in 0..3 {
                    out.set(c, y, x, self.bilinear_reflect(c, sy as f32, sx as f32).clamp(0.0, 1.0));
                }
            }
        }
        out
    }
}

/// Whole-sample border reflection: …2,1,0 | 0..n-1 | n-2,n-3…
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = (2 * n - 2) as isize;
    let mut k = i.rem_euclid(period);
    if k >= n as isize {
        k = period - k;
    }
    k as usize
}

/// RGB in [0,1] → (hue degrees [0,360), saturation [0,1], value [0,1]).
pub fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / delta).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h.rem_euclid(360.0), s, max)
}

/// Inverse of [`rgb_to_hsv`]; saturation 0 reproduces the value exactly.
pub fn hsv_to_rgb(hsv: (f32, f32, f32)) -> (f32, f32, f32) {
    let (h, s, v) = hsv;
    if s == 0.0 {
        return (v, v, v);
    }
    let h = h.rem_euclid(360.0) / 60.0;
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// 3×3 projective transform acting on (x, y) points.
#[derive(Debug, Clone, PartialEq)]
pub struct Homography {
    m: [f64; 9],
}

impl Homography {
    pub fn identity() -> Self {
        Homography { m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0] }
    }

    /// Solve the 8-unknown projective transform mapping each `src` corner to
    /// its `dst` counterpart (m22 fixed at 1), by Gaussian elimination with
    /// partial pivoting. Returns `None` when the system is singular.
    pub fn from_correspondences(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Option<Self> {
        let mut a = [[0.0f64; 9]; 8];
        for (i, (&(sx, sy), &(dx, dy))) in src.iter().zip(dst.iter()).enumerate() {
            a[2 * i] = [sx, sy, 1.0, 0.0, 0.0, 0.0, -dx * sx, -dx * sy, dx];
            a[2 * i + 1] = [0.0, 0.0, 0.0, sx, sy, 1.0, -dy * sx, -dy * sy, dy];
        }
        // forward elimination
        for col in 0..8 {
            let pivot = (col..8).max_by(|&r1, &r2| {
                a[r1][col].abs().partial_cmp(&a[r2][col].abs()).unwrap()
            })?;
            if a[pivot][col].abs() < 1e-12 {
                return None;
            }
            a.swap(col, pivot);
            for row in col + 1..8 {
                let f = a[row][col] / a[col][col];
                for k in col..9 {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
        // back substitution
        let mut x = [0.0f64; 8];
        for col in (0..8).rev() {
            let mut acc = a[col][8];
            for k in col + 1..8 {
                acc -= a[col][k] * x[k];
            }
            x[col] = acc / a[col][col];
        }
        let m = [x[0], x[1], x[2], x[3], x[4], x[5], x[6], x[7], 1.0];
        Some(Homography { m })
    }

    /// Map a point; returns (x', y').
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        let denom = m[6] * x + m[7] * y + m[8];
        ((m[0] * x + m[1] * y + m[2]) / denom, (m[3] * x + m[4] * y + m[5]) / denom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image() -> Image {
        let mut img = Image::new(4, 6);
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..6 {
                    img.set(c, y, x, ((c * 31 + y * 7 + x * 3) % 17) as f32 / 16.0);
                }
            }
        }
        img
    }

    #[test]
    fn hflip_is_involution() {
        let img = test_image();
        assert_eq!(img.hflip().hflip(), img);
        assert_eq!(img.vflip().vflip(), img);
        assert_eq!(img.hflip().get(0, 0, 0), img.get(0, 0, 5));
    }

    #[test]
    fn flips_preserve_histograms() {
        let img = test_image();
        let mut a = img.data().to_vec();
        let mut b = img.hflip().data().to_vec();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn rgb8_roundtrip() {
        let img = test_image();
        let bytes = img.to_rgb8();
        let back = Image::from_rgb8(4, 6, &bytes).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1.0 / 255.0 + 1e-6);
        }
        // already-quantized values survive exactly
        assert_eq!(back.to_rgb8(), bytes);
    }

    #[test]
    fn hsv_roundtrip() {
        for &(r, g, b) in
            &[(0.2f32, 0.5f32, 0.8f32), (1.0, 0.0, 0.0), (0.3, 0.3, 0.3), (0.0, 0.0, 0.0), (0.9, 0.8, 0.1)]
        {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb((h, s, v));
            assert!((r - r2).abs() < 1e-5 && (g - g2).abs() < 1e-5 && (b - b2).abs() < 1e-5);
        }
    }

    #[test]
    fn hue_shift_leaves_gray_untouched() {
        let mut img = Image::new(2, 2);
        for v in img.data_mut() {
            *v = 0.42;
        }
        assert_eq!(img.shift_hue(20.0), img);
    }

    #[test]
    fn contrast_about_mean_preserves_constant() {
        let mut img = Image::new(3, 3);
        for v in img.data_mut() {
            *v = 0.6;
        }
        let out = img.scale_contrast(0.5);
        for &v in out.data() {
            assert!((v - 0.6).abs() < 1e-6);
        }
    }

    #[test]
    fn blur_preserves_constant_image() {
        let mut img = Image::new(8, 8);
        for v in img.data_mut() {
            *v = 0.37;
        }
        let out = img.gaussian_blur(2.0, 6);
        for &v in out.data() {
            assert!((v - 0.37).abs() < 1e-5);
        }
    }

    #[test]
    fn blur_smooths_checkerboard() {
        let mut img = Image::new(8, 8);
        for y in 0..8 {
            for x in 0..8 {
                let v = if (x + y) % 2 == 0 { 1.0 } else { 0.0 };
                for c in 0..3 {
                    img.set(c, y, x, v);
                }
            }
        }
        let out = img.gaussian_blur(2.0, 6);
        for &v in out.data() {
            assert!((v - 0.5).abs() < 0.05);
        }
    }

    #[test]
    fn reflect_indexing() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(0, 1), 0);
        assert_eq!(reflect(3, 5), 3);
    }

    #[test]
    fn identity_homography_roundtrip() {
        let src = [(0.0, 0.0), (9.0, 0.0), (9.0, 9.0), (0.0, 9.0)];
        let h = Homography::from_correspondences(&src, &src).unwrap();
        let (x, y) = h.apply(3.7, 5.2);
        assert!((x - 3.7).abs() < 1e-9 && (y - 5.2).abs() < 1e-9);
    }

    #[test]
    fn solved_homography_maps_corners() {
        let src = [(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0)];
        let dst = [(1.0, -0.5), (9.2, 0.3), (10.5, 9.0), (-0.4, 10.2)];
        let h = Homography::from_correspondences(&src, &dst).unwrap();
        for (s, d) in src.iter().zip(dst.iter()) {
            let (x, y) = h.apply(s.0, s.1);
            assert!((x - d.0).abs() < 1e-4 && (y - d.1).abs() < 1e-4, "corner {s:?}");
        }
    }

    #[test]
    fn degenerate_correspondences_rejected() {
        // all four source corners collinear → singular system
        let src = [(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (3.0, 3.0)];
        let dst = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        assert!(Homography::from_correspondences(&src, &dst).is_none());
    }

    #[test]
    fn warp_identity_is_exact_inside() {
        let img = test_image();
        let out = img.warp(&Homography::identity());
        assert_eq!(out, img);
    }
}
