//! Training-set augmentation: flips plus seeded random perspective warps.

use rand::Rng;

use crate::error::{Error, Result};
use crate::img::{Homography, Image};
use crate::rng;

use super::ImagePatch;

/// Corner displacement bound for perspective warps, as a fraction of the
/// image side.
pub const DEFAULT_RHO: f32 = 0.15;

const PERSPECTIVE_ATTEMPTS: usize = 5;

/// One augmentation primitive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentMode {
    Identity,
    HFlip,
    VFlip,
    Perspective { rho: f32 },
}

/// Apply one augmentation. `seed` only matters for `Perspective`.
pub fn augment(img: &Image, mode: AugmentMode, seed: u64) -> Result<Image> {
    match mode {
        AugmentMode::Identity => Ok(img.clone()),
        AugmentMode::HFlip => Ok(img.hflip()),
        AugmentMode::VFlip => Ok(img.vflip()),
        AugmentMode::Perspective { rho } => random_perspective(img, rho, seed),
    }
}

/// Warp with each corner displaced uniformly within ±rho·side. A zero rho is
/// the identity. Retries a degenerate corner draw up to five times before
/// giving up.
pub fn random_perspective(img: &Image, rho: f32, seed: u64) -> Result<Image> {
    if !(0.0..0.5).contains(&rho) {
        return Err(Error::InvalidConfig(format!(
            "perspective rho must lie in [0, 0.5), got {rho}"
        )));
    }
    if rho == 0.0 {
        return Ok(img.clone());
    }
    let (h, w) = (img.h() as f64, img.w() as f64);
    let corners = [(0.0, 0.0), (w - 1.0, 0.0), (w - 1.0, h - 1.0), (0.0, h - 1.0)];
    let (rx, ry) = (rho as f64 * w, rho as f64 * h);
    let mut rng = rng::stream(seed, &[]);
    for _ in 0..PERSPECTIVE_ATTEMPTS {
        let mut displaced = corners;
        for p in displaced.iter_mut() {
            p.0 += rng.gen_range(-rx..=rx);
            p.1 += rng.gen_range(-ry..=ry);
        }
        // warp() wants the output→source map, i.e. the inverse of the
        // corner-moving transform.
        if let Some(inv) = Homography::from_correspondences(&displaced, &corners) {
            return Ok(img.warp(&inv));
        }
    }
    Err(Error::InvalidInput(format!(
        "no valid perspective found in {PERSPECTIVE_ATTEMPTS} attempts"
    )))
}

/// Expand base patches to `factor` variants each. Variant v cycles through
/// identity/hflip/vflip and, from v = 3 on, adds a perspective warp seeded per
/// (patch, variant). Variant 0 is the base patch unchanged; every output is
/// quantized through 8-bit RGB so in-memory data matches files on disk.
pub fn expand_train(
    patches: &[ImagePatch],
    factor: usize,
    rho: f32,
    seed: u64,
) -> Result<Vec<ImagePatch>> {
    if factor == 0 {
        return Err(Error::InvalidConfig("augmentation factor must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(patches.len() * factor);
    for base in patches {
        for v in 0..factor {
            let flipped = match v % 3 {
                0 => base.image.clone(),
                1 => base.image.hflip(),
                _ => base.image.vflip(),
            };
            let image = if v / 3 == 0 {
                flipped
            } else {
                let vseed = rng::derive(seed, &[rng::TAG_AUGMENT, rng::hash_str(&base.id), v as u64]);
                random_perspective(&flipped, rho, vseed)?
            };
            let (px, h, w) = (image.to_rgb8(), image.h(), image.w());
            out.push(ImagePatch {
                id: format!("{}_v{v}", base.id),
                class_id: base.class_id,
                source_id: base.source_id.clone(),
                offset: base.offset,
                augmented: v != 0,
                image: Image::from_rgb8(h, w, &px)?,
            });
        }
    }
    Ok(out)
}
