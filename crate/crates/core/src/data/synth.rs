//! Synthetic mineralogy-style patch generator.
//!
//! Each class is a colour/texture recipe rendered in HSV: a base hue,
//! saturation, and value plus a value-modulating texture field (smooth value
//! noise, stripes, or thresholded blobs). Two class pairs are deliberately
//! confusable: classes 0/1 share everything but hue, classes 2/3 share
//! everything but texture grain. Sources are quantized to 8-bit RGB before
//! cropping so in-memory patches match PNG files bit for bit.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::img::{hsv_to_rgb, Image};
use crate::rng;

use super::{
    expand_train, extract_patches, split_stratified, Dataset, DatasetManifest, ImagePatch,
    NormalizationStats, DEFAULT_RHO,
};

/// Class indexes that differ only in hue.
pub const HUE_ONLY_PAIR: (usize, usize) = (0, 1);
/// Class indexes that differ only in texture grain.
pub const TEXTURE_ONLY_PAIR: (usize, usize) = (2, 3);

const CROPS_PER_SOURCE: usize = 10;
const HUE_JITTER: f32 = 6.0;
const SAT_JITTER: f32 = 0.05;
const VAL_JITTER: f32 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Texture {
    Smooth { grain: usize },
    Stripes { period: f32, angle_deg: f32 },
    Blobs { grain: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct ClassSpec {
    pub hue: f32,
    pub sat: f32,
    pub val: f32,
    pub amp: f32,
    pub texture: Texture,
}

pub(crate) fn class_spec(index: usize) -> ClassSpec {
    match index {
        0 => ClassSpec { hue: 30.0, sat: 0.65, val: 0.55, amp: 0.06, texture: Texture::Smooth { grain: 6 } },
        1 => ClassSpec { hue: 210.0, sat: 0.65, val: 0.55, amp: 0.06, texture: Texture::Smooth { grain: 6 } },
        2 => ClassSpec { hue: 55.0, sat: 0.12, val: 0.60, amp: 0.30, texture: Texture::Smooth { grain: 2 } },
        3 => ClassSpec { hue: 55.0, sat: 0.12, val: 0.60, amp: 0.30, texture: Texture::Smooth { grain: 12 } },
        4 => ClassSpec { hue: 330.0, sat: 0.45, val: 0.55, amp: 0.22, texture: Texture::Stripes { period: 8.0, angle_deg: 30.0 } },
        5 => ClassSpec { hue: 275.0, sat: 0.45, val: 0.55, amp: 0.25, texture: Texture::Blobs { grain: 10 } },
        i => ClassSpec {
            hue: (i as f32 * 67.0) % 360.0,
            sat: 0.5,
            val: 0.55,
            amp: 0.15,
            texture: Texture::Smooth { grain: 4 },
        },
    }
}

/// Smooth noise in [-1, 1]: a seeded value lattice at `grain` spacing,
/// smoothstep-interpolated per pixel.
fn value_noise(h: usize, w: usize, grain: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let g = grain.max(1);
    let gw = w / g + 2;
    let gh = h / g + 2;
    let lattice: Vec<f32> = (0..gh * gw).map(|_| rng.gen_range(-1.0f32..=1.0)).collect();
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        let fy = y as f32 / g as f32;
        let y0 = fy as usize;
        let ty = fy - y0 as f32;
        let sy = ty * ty * (3.0 - 2.0 * ty);
        for x in 0..w {
            let fx = x as f32 / g as f32;
            let x0 = fx as usize;
            let tx = fx - x0 as f32;
            let sx = tx * tx * (3.0 - 2.0 * tx);
            let v00 = lattice[y0 * gw + x0];
            let v01 = lattice[y0 * gw + x0 + 1];
            let v10 = lattice[(y0 + 1) * gw + x0];
            let v11 = lattice[(y0 + 1) * gw + x0 + 1];
            let top = v00 + (v01 - v00) * sx;
            let bot = v10 + (v11 - v10) * sx;
            out[y * w + x] = top + (bot - top) * sy;
        }
    }
    out
}

fn texture_field(texture: Texture, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    match texture {
        Texture::Smooth { grain } => value_noise(h, w, grain, rng),
        Texture::Stripes { period, angle_deg } => {
            let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
            let (s, c) = angle_deg.to_radians().sin_cos();
            let mut out = vec![0.0f32; h * w];
            for y in 0..h {
                for x in 0..w {
                    let u = x as f32 * c + y as f32 * s;
                    out[y * w + x] = (std::f32::consts::TAU * u / period + phase).sin();
                }
            }
            out
        }
        Texture::Blobs { grain } => value_noise(h, w, grain, rng)
            .into_iter()
            .map(|v| if v > 0.0 { 1.0 } else { -1.0 })
            .collect(),
    }
}

/// Render one source image for a class recipe, with per-source HSV jitter,
/// then quantize through 8-bit RGB.
pub(crate) fn generate_source(spec: &ClassSpec, size: usize, seed: u64) -> Image {
    let mut rng = rng::stream(seed, &[]);
    let hue = (spec.hue + rng.gen_range(-HUE_JITTER..=HUE_JITTER)).rem_euclid(360.0);
    let sat = (spec.sat + rng.gen_range(-SAT_JITTER..=SAT_JITTER)).clamp(0.0, 1.0);
    let val = spec.val + rng.gen_range(-VAL_JITTER..=VAL_JITTER);
    let field = texture_field(spec.texture, size, size, &mut rng);
    let mut img = Image::new(size, size);
    let plane = size * size;
    for (i, f) in field.iter().enumerate() {
        let (r, g, b) = hsv_to_rgb((hue, sat, (val + spec.amp * f).clamp(0.0, 1.0)));
        img.data_mut()[i] = r;
        img.data_mut()[plane + i] = g;
        img.data_mut()[2 * plane + i] = b;
    }
    Image::from_rgb8(size, size, &img.to_rgb8()).unwrap()
}

/// Generate the full dataset a manifest describes: render sources, crop
/// patches, split stratified, augment the training half, and fit whitening
/// statistics on the (augmented) training split.
pub fn synth_dataset(manifest: &DatasetManifest) -> Result<Dataset> {
    manifest.validate()?;
    let size = manifest.patch_size * 2;
    let sources_per_class = manifest.patches_per_class.div_ceil(CROPS_PER_SOURCE);
    let mut patches: Vec<ImagePatch> = Vec::new();
    for (class_id, name) in manifest.classes.iter().enumerate() {
        let spec = class_spec(class_id);
        let mut remaining = manifest.patches_per_class;
        for si in 0..sources_per_class {
            let source_seed = rng::derive(manifest.seed, &[rng::TAG_SYNTH, class_id as u64, si as u64]);
            let source = generate_source(&spec, size, source_seed);
            let take = remaining.min(CROPS_PER_SOURCE);
            let crop_seed = rng::derive(manifest.seed, &[rng::TAG_CROP, class_id as u64, si as u64]);
            patches.extend(extract_patches(
                &source,
                &format!("{name}_s{si:03}"),
                class_id,
                manifest.patch_size,
                take,
                crop_seed,
            )?);
            remaining -= take;
        }
    }
    let (base_train, test) = split_stratified(patches, manifest.split, manifest.seed)?;
    let train = expand_train(&base_train, manifest.augmentation_factor, DEFAULT_RHO, manifest.seed)?;
    let refs: Vec<&Image> = train.iter().map(|p| &p.image).collect();
    let stats = NormalizationStats::compute(&refs)?;
    let dataset = Dataset { classes: manifest.classes.clone(), stats, train, test };
    dataset.validate()?;
    Ok(dataset)
}
