//! Case-based explanations: per-prototype evidence with activation heatmaps,
//! provenance patches, and descriptor sensitivity profiles.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{random_perspective, ImagePatch, DEFAULT_RHO};
use crate::error::{Error, Result};
use crate::img::Image;
use crate::model::{argmax, ProtoPartsModel, Stage};
use crate::prototype::{similarity, top_activation};
use crate::rng;
use crate::tensor::Tape;

/// Hue rotation applied by the `hue` descriptor probe, in degrees.
pub const HUE_SHIFT_DEG: f32 = 20.0;
/// Saturation multiplier applied by the `saturation` probe.
pub const SATURATION_SCALE: f32 = 0.5;
/// Additive brightness offset applied by the `brightness` probe.
pub const BRIGHTNESS_DELTA: f32 = 0.2;
/// Contrast multiplier (about each channel's mean) for the `contrast` probe.
pub const CONTRAST_SCALE: f32 = 0.5;
/// Gaussian blur sigma, in pixels, for the `texture` probe.
pub const TEXTURE_BLUR_SIGMA: f32 = 2.0;
const TEXTURE_BLUR_RADIUS: usize = 6;
/// Default number of evidence entries in a report.
pub const DEFAULT_EVIDENCE: usize = 5;

/// A pixel-space probe that degrades one visual descriptor of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Perturbation {
    /// Leaves the image untouched; its sensitivity is exactly zero.
    Identity,
    Hue,
    Saturation,
    Brightness,
    Contrast,
    Texture,
    Shape,
}

impl Perturbation {
    /// The six probes that make up a descriptor profile.
    pub const PROFILE: [Perturbation; 6] = [
        Perturbation::Hue,
        Perturbation::Saturation,
        Perturbation::Brightness,
        Perturbation::Contrast,
        Perturbation::Texture,
        Perturbation::Shape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Perturbation::Identity => "identity",
            Perturbation::Hue => "hue",
            Perturbation::Saturation => "saturation",
            Perturbation::Brightness => "brightness",
            Perturbation::Contrast => "contrast",
            Perturbation::Texture => "texture",
            Perturbation::Shape => "shape",
        }
    }

    /// Apply the probe at its fixed severity. `seed` only affects `Shape`.
    pub fn apply(self, image: &Image, seed: u64) -> Result<Image> {
        Ok(match self {
            Perturbation::Identity => image.clone(),
            Perturbation::Hue => image.shift_hue(HUE_SHIFT_DEG),
            Perturbation::Saturation => image.scale_saturation(SATURATION_SCALE),
            Perturbation::Brightness => image.add_brightness(BRIGHTNESS_DELTA),
            Perturbation::Contrast => image.scale_contrast(CONTRAST_SCALE),
            Perturbation::Texture => image.gaussian_blur(TEXTURE_BLUR_SIGMA, TEXTURE_BLUR_RADIUS),
            Perturbation::Shape => random_perspective(image, DEFAULT_RHO, seed)?,
        })
    }
}

/// Map from descriptor name to relative sensitivity in [-1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DescriptorProfile(pub BTreeMap<String, f32>);

/// A prototype's upsampled, min-max normalized activation map over one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub h: usize,
    pub w: usize,
    /// Row-major values in [0, 1]; all zeros when the raw map is constant.
    pub values: Vec<f32>,
    /// Tightest rectangle (y0, y1, x0, x1), half-open, covering every pixel
    /// at or above the 95th percentile.
    pub bbox: (usize, usize, usize, usize),
}

/// One prototype's contribution to a prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub prototype_id: usize,
    /// Class the prototype belongs to.
    pub class_id: usize,
    /// Top activation of the prototype over the input.
    pub similarity_score: f32,
    /// Head weight connecting the prototype to the predicted class.
    pub head_weight: f32,
    /// `similarity_score * head_weight`.
    pub contribution: f32,
    /// Feature-grid cell (row, column) of the top activation.
    pub argmax_cell: (usize, usize),
    pub heatmap_path: String,
    pub source_patch_path: String,
    pub descriptor_profile: DescriptorProfile,
}

/// The JSON-facing explanation for one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub input_id: String,
    pub predicted_class: String,
    /// Logit per class, indexed by class id.
    pub class_scores: Vec<f32>,
    /// Sorted by descending contribution to the predicted class.
    pub evidence: Vec<Evidence>,
}

/// A report plus the image artifacts referenced by its paths.
pub struct Explanation {
    pub report: ExplanationReport,
    /// (relative path, heatmap) per evidence entry, in report order.
    pub heatmaps: Vec<(String, Heatmap)>,
    /// (relative path, provenance patch pixels) per evidence entry.
    pub patches: Vec<(String, Image)>,
}

/// Round to six significant decimal digits; used for report serialization.
pub fn round_sig6(x: f32) -> f32 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let v = x as f64;
    let exp = v.abs().log10().floor() as i32;
    let scale = 10f64.powi(5 - exp);
    ((v * scale).round() / scale) as f32
}

fn rounded_for_output(report: &ExplanationReport) -> ExplanationReport {
    let mut r = report.clone();
    for v in &mut r.class_scores {
        *v = round_sig6(*v);
    }
    for e in &mut r.evidence {
        e.similarity_score = round_sig6(e.similarity_score);
        e.head_weight = round_sig6(e.head_weight);
        e.contribution = round_sig6(e.contribution);
        for v in e.descriptor_profile.0.values_mut() {
            *v = round_sig6(*v);
        }
    }
    r
}

/// Serialize a report with every float rounded to six significant digits.
pub fn report_json(report: &ExplanationReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(&rounded_for_output(report))?)
}

/// Bilinear upsampling with corner alignment: output corners sample the map
/// corners exactly, and map nodes land on evenly spaced output pixels.
fn upsample_align_corners(map: &[f32], gh: usize, gw: usize, oh: usize, ow: usize) -> Vec<f32> {
    let fy = if oh > 1 { (gh - 1) as f32 / (oh - 1) as f32 } else { 0.0 };
    let fx = if ow > 1 { (gw - 1) as f32 / (ow - 1) as f32 } else { 0.0 };
    let mut out = vec![0.0f32; oh * ow];
    for y in 0..oh {
        let sy = y as f32 * fy;
        let y0 = (sy.floor() as usize).min(gh - 1);
        let y1 = (y0 + 1).min(gh - 1);
        let ty = sy - y0 as f32;
        for x in 0..ow {
            let sx = x as f32 * fx;
            let x0 = (sx.floor() as usize).min(gw - 1);
            let x1 = (x0 + 1).min(gw - 1);
            let tx = sx - x0 as f32;
            let top = map[y0 * gw + x0] * (1.0 - tx) + map[y0 * gw + x1] * tx;
            let bot = map[y1 * gw + x0] * (1.0 - tx) + map[y1 * gw + x1] * tx;
            out[y * ow + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Min-max normalize in place; a constant map becomes all zeros.
fn normalize_min_max(values: &mut [f32]) {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in values.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi > lo {
        let inv = 1.0 / (hi - lo);
        for v in values.iter_mut() {
            *v = (*v - lo) * inv;
        }
    } else {
        values.fill(0.0);
    }
}

/// Tightest half-open rectangle covering all pixels at or above the 95th
/// percentile (nearest-rank).
fn percentile_bbox(values: &[f32], h: usize, w: usize) -> (usize, usize, usize, usize) {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = (0.95 * sorted.len() as f64).ceil() as usize;
    let threshold = sorted[rank.saturating_sub(1)];
    let (mut y0, mut y1, mut x0, mut x1) = (h, 0, w, 0);
    for y in 0..h {
        for x in 0..w {
            if values[y * w + x] >= threshold {
                y0 = y0.min(y);
                y1 = y1.max(y + 1);
                x0 = x0.min(x);
                x1 = x1.max(x + 1);
            }
        }
    }
    (y0, y1, x0, x1)
}

/// Build a heatmap from one prototype's distance map row.
fn heatmap_from_distances(dist_row: &[f32], grid: usize, size: usize) -> Result<Heatmap> {
    let mut sim = Vec::with_capacity(dist_row.len());
    for &d in dist_row {
        sim.push(similarity(d)?);
    }
    let mut values = upsample_align_corners(&sim, grid, grid, size, size);
    normalize_min_max(&mut values);
    let bbox = percentile_bbox(&values, size, size);
    Ok(Heatmap { h: size, w: size, values, bbox })
}

fn check_prototype_id(model: &ProtoPartsModel, prototype: usize) -> Result<()> {
    let count = model.prototypes.count();
    if prototype >= count {
        return Err(Error::InvalidInput(format!(
            "prototype id {prototype} is out of range (model has {count})"
        )));
    }
    Ok(())
}

/// Where a prototype looks on `image`: its similarity map upsampled to input
/// resolution and min-max normalized, with a 95th-percentile bounding box.
pub fn activation_heatmap(
    model: &mut ProtoPartsModel,
    image: &Image,
    prototype: usize,
) -> Result<Heatmap> {
    check_prototype_id(model, prototype)?;
    let batch = model.image_tensor(image)?;
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, batch, Stage::Eval)?;
    let dist = tape.value(pass.distances);
    let grid = dist.shape()[2];
    let cells = grid * grid;
    let row = &dist.data()[prototype * cells..(prototype + 1) * cells];
    heatmap_from_distances(row, grid, model.backbone.config().input_size)
}

/// A prototype's best activation anywhere on `image`, with its cell.
fn top_similarity(
    model: &mut ProtoPartsModel,
    image: &Image,
    prototype: usize,
) -> Result<(f32, (usize, usize))> {
    let batch = model.image_tensor(image)?;
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, batch, Stage::Eval)?;
    let dist = tape.value(pass.distances);
    let grid = dist.shape()[2];
    let cells = grid * grid;
    let row = &dist.data()[prototype * cells..(prototype + 1) * cells];
    let mut best = 0usize;
    for (i, &d) in row.iter().enumerate() {
        if d < row[best] {
            best = i;
        }
    }
    Ok((similarity(row[best])?, (best / grid, best % grid)))
}

/// Relative drop of a prototype's top activation on its own source image
/// under one probe: `(s0 - s_delta) / s0`, clamped to [-1, 1].
pub fn perturbation_sensitivity(
    model: &mut ProtoPartsModel,
    prototype: usize,
    probe: Perturbation,
) -> Result<f32> {
    check_prototype_id(model, prototype)?;
    let prov = model.prototypes.provenance()[prototype]
        .clone()
        .ok_or(Error::MissingProvenance { prototype })?;
    let seed = rng::derive(
        0,
        &[rng::TAG_DESCRIPTOR, rng::hash_str(&prov.train_image_id), prototype as u64],
    );
    let (s0, _) = top_similarity(model, &prov.source_image, prototype)?;
    let perturbed = probe.apply(&prov.source_image, seed)?;
    let (sd, _) = top_similarity(model, &perturbed, prototype)?;
    Ok(((s0 - sd) / s0).clamp(-1.0, 1.0))
}

/// Sensitivities of one prototype to all six descriptor probes.
pub fn descriptor_profile(model: &mut ProtoPartsModel, prototype: usize) -> Result<DescriptorProfile> {
    let mut map = BTreeMap::new();
    for probe in Perturbation::PROFILE {
        map.insert(probe.name().to_string(), perturbation_sensitivity(model, prototype, probe)?);
    }
    Ok(DescriptorProfile(map))
}

/// Explain one prediction with the `k` prototypes contributing most to the
/// predicted class. `k` is clamped to the prototype count.
pub fn explain(model: &mut ProtoPartsModel, patch: &ImagePatch, k: usize) -> Result<Explanation> {
    if !model.prototypes.all_pushed() {
        return Err(Error::InvalidInput(
            "model has unpushed prototypes; push before explaining".into(),
        ));
    }
    let count = model.prototypes.count();
    let k = k.min(count);
    let batch = model.image_tensor(&patch.image)?;
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, batch, Stage::Eval)?;
    let logits = tape.value(pass.logits).data().to_vec();
    let scores = tape.value(pass.scores).data().to_vec();
    let dist = tape.value(pass.distances).clone();
    let (_, cells) = top_activation(&dist)?;
    let grid = dist.shape()[2];
    let size = model.backbone.config().input_size;
    drop(tape);

    let predicted = argmax(&logits);
    let weights: Vec<f32> =
        (0..count).map(|p| model.head.weight.value.at(&[predicted, p])).collect();
    let contrib: Vec<f32> = (0..count).map(|p| scores[p] * weights[p]).collect();
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by(|&a, &b| contrib[b].total_cmp(&contrib[a]).then(a.cmp(&b)));
    order.truncate(k);

    let mut evidence = Vec::with_capacity(k);
    let mut heatmaps = Vec::with_capacity(k);
    let mut patches = Vec::with_capacity(k);
    for &p in &order {
        let heatmap_path = format!("{}/heatmap_p{p:03}.png", patch.id);
        let source_patch_path = format!("{}/prototype_p{p:03}.png", patch.id);
        let row = &dist.data()[p * grid * grid..(p + 1) * grid * grid];
        heatmaps.push((heatmap_path.clone(), heatmap_from_distances(row, grid, size)?));
        let prov = model.prototypes.provenance()[p]
            .clone()
            .ok_or(Error::MissingProvenance { prototype: p })?;
        patches.push((source_patch_path.clone(), prov.patch_pixels));
        evidence.push(Evidence {
            prototype_id: p,
            class_id: model.prototypes.class_of(p),
            similarity_score: scores[p],
            head_weight: weights[p],
            contribution: contrib[p],
            argmax_cell: cells[p],
            heatmap_path,
            source_patch_path,
            descriptor_profile: descriptor_profile(model, p)?,
        });
    }
    let report = ExplanationReport {
        input_id: patch.id.clone(),
        predicted_class: model.classes[predicted].clone(),
        class_scores: logits,
        evidence,
    };
    Ok(Explanation { report, heatmaps, patches })
}
