//! Dataset preparation: patch extraction, stratified splitting, whitening
//! statistics, and the manifest describing a generated dataset.

mod augment;
mod synth;

pub use augment::{augment, expand_train, random_perspective, AugmentMode, DEFAULT_RHO};
pub use synth::{synth_dataset, HUE_ONLY_PAIR, TEXTURE_ONLY_PAIR};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::Image;
use crate::rng;
use crate::tensor::Tensor;

/// One labelled crop plus its provenance.
#[derive(Debug, Clone)]
pub struct ImagePatch {
    pub id: String,
    pub class_id: usize,
    /// Identifier of the image this patch was cropped from.
    pub source_id: String,
    /// (row, column) of the crop's top-left corner in the source image.
    pub offset: (usize, usize),
    /// True for augmentation variants, false for base patches.
    pub augmented: bool,
    pub image: Image,
}

/// Parameters describing a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub patches_per_class: usize,
    pub patch_size: usize,
    /// Train fraction of the stratified split.
    pub split: f32,
    pub augmentation_factor: usize,
    pub seed: u64,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        DatasetManifest {
            classes: ["AU", "BRU", "CYS", "STR", "WD", "WW"].map(String::from).to_vec(),
            patches_per_class: 300,
            patch_size: 64,
            split: 0.8,
            augmentation_factor: 4,
            seed: 0,
        }
    }
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::InvalidConfig("manifest needs at least one class".into()));
        }
        let mut names = self.classes.clone();
        names.sort();
        names.dedup();
        if names.len() != self.classes.len() {
            return Err(Error::InvalidConfig("duplicate class names in manifest".into()));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "split fraction must lie strictly between 0 and 1, got {}",
                self.split
            )));
        }
        if self.patch_size == 0 {
            return Err(Error::InvalidConfig("patch_size must be positive".into()));
        }
        if self.patches_per_class < 2 {
            return Err(Error::InvalidConfig("need at least 2 patches per class to split".into()));
        }
        if self.augmentation_factor == 0 {
            return Err(Error::InvalidConfig("augmentation_factor must be at least 1".into()));
        }
        Ok(())
    }

    /// Per-class train patch count under the stratified split.
    pub fn train_per_class(&self) -> usize {
        per_class_train(self.patches_per_class, self.split)
    }

    /// The three dataset sizes the pipeline reports: train and test patch
    /// counts after the split, and the train count after augmentation.
    pub fn counts(&self) -> SplitCounts {
        let train = self.train_per_class() * self.classes.len();
        let total = self.patches_per_class * self.classes.len();
        SplitCounts {
            train,
            test: total - train,
            augmented_train: train * self.augmentation_factor,
        }
    }
}

fn per_class_train(n: usize, split: f32) -> usize {
    (n as f64 * split as f64).round() as usize
}

/// Train/test/augmented sizes implied by a manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub test: usize,
    pub augmented_train: usize,
}

impl std::ops::Add for SplitCounts {
    type Output = SplitCounts;
    fn add(self, rhs: SplitCounts) -> SplitCounts {
        SplitCounts {
            train: self.train + rhs.train,
            test: self.test + rhs.test,
            augmented_train: self.augmented_train + rhs.augmented_train,
        }
    }
}

/// Per-channel whitening statistics from the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl NormalizationStats {
    /// Two-pass biased mean/std per channel, accumulated in f64 and floored
    /// at 1e-6 so whitening never divides by zero.
    pub fn compute(images: &[&Image]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Empty("image set for normalization statistics"));
        }
        let mut mean = [0.0f64; 3];
        let mut count = 0usize;
        for img in images {
            let plane = img.h() * img.w();
            for c in 0..3 {
                for &v in &img.data()[c * plane..(c + 1) * plane] {
                    mean[c] += v as f64;
                }
            }
            count += plane;
        }
        for m in mean.iter_mut() {
            *m /= count as f64;
        }
        let mut var = [0.0f64; 3];
        for img in images {
            let plane = img.h() * img.w();
            for c in 0..3 {
                for &v in &img.data()[c * plane..(c + 1) * plane] {
                    let d = v as f64 - mean[c];
                    var[c] += d * d;
                }
            }
        }
        let mut out = NormalizationStats { mean: [0.0; 3], std: [0.0; 3] };
        for c in 0..3 {
            out.mean[c] = mean[c] as f32;
            out.std[c] = ((var[c] / count as f64).sqrt() as f32).max(1e-6);
        }
        Ok(out)
    }
}

/// Whiten one image into a [3,h,w] tensor: per channel (I − m) / σ.
pub fn whiten(img: &Image, stats: &NormalizationStats) -> Tensor {
    let plane = img.h() * img.w();
    let mut data = vec![0.0f32; 3 * plane];
    whiten_into(img, stats, &mut data);
    Tensor::new(vec![3, img.h(), img.w()], data).unwrap()
}

pub fn whiten_into(img: &Image, stats: &NormalizationStats, out: &mut [f32]) {
    let plane = img.h() * img.w();
    debug_assert_eq!(out.len(), 3 * plane);
    for c in 0..3 {
        let inv = 1.0 / stats.std[c];
        let m = stats.mean[c];
        for (o, &v) in out[c * plane..(c + 1) * plane].iter_mut().zip(&img.data()[c * plane..]) {
            *o = (v - m) * inv;
        }
    }
}

/// Crop `count` size×size patches at seeded uniform-random offsets.
pub fn extract_patches(
    source: &Image,
    source_id: &str,
    class_id: usize,
    size: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<ImagePatch>> {
    if source.h() < size || source.w() < size {
        return Err(Error::InvalidInput(format!(
            "source image {}x{} smaller than patch size {size}",
            source.h(),
            source.w()
        )));
    }
    let mut rng = rng::stream(seed, &[]);
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let y0 = rng.gen_range(0..=source.h() - size);
        let x0 = rng.gen_range(0..=source.w() - size);
        out.push(ImagePatch {
            id: format!("{source_id}_c{k:02}"),
            class_id,
            source_id: source_id.to_string(),
            offset: (y0, x0),
            augmented: false,
            image: source.crop(y0, x0, size, size)?,
        });
    }
    Ok(out)
}

/// Per-class seeded shuffle and split at `fraction`; every class lands within
/// one patch of the global ratio and no patch appears in both halves.
pub fn split_stratified(
    patches: Vec<ImagePatch>,
    fraction: f32,
    seed: u64,
) -> Result<(Vec<ImagePatch>, Vec<ImagePatch>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "split fraction must lie strictly between 0 and 1, got {fraction}"
        )));
    }
    if patches.is_empty() {
        return Err(Error::Empty("patch set to split"));
    }
    let max_class = patches.iter().map(|p| p.class_id).max().unwrap();
    let mut by_class: Vec<Vec<ImagePatch>> = (0..=max_class).map(|_| Vec::new()).collect();
    for p in patches {
        by_class[p.class_id].push(p);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class_id, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "class {class_id} has {} patch(es); need at least 2 to split",
                members.len()
            )));
        }
        members.sort_by(|a, b| a.id.cmp(&b.id));
        let mut rng = rng::stream(seed, &[rng::TAG_SPLIT, class_id as u64]);
        members.shuffle(&mut rng);
        let n_train = per_class_train(members.len(), fraction).clamp(1, members.len() - 1);
        let rest = members.split_off(n_train);
        train.extend(members);
        test.extend(rest);
    }
    Ok((train, test))
}

/// A ready-to-train dataset: class list, whitening statistics, and the two
/// splits (train already augmented).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub stats: NormalizationStats,
    pub train: Vec<ImagePatch>,
    pub test: Vec<ImagePatch>,
}

impl Dataset {
    /// The un-augmented training patches, in id order. Prototype pushes and
    /// activation extraction iterate these.
    pub fn base_train(&self) -> Vec<&ImagePatch> {
        let mut out: Vec<&ImagePatch> = self.train.iter().filter(|p| !p.augmented).collect();
        out.sort_by(|a, b| a.id.cmp(&b.id));
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Empty("dataset class list"));
        }
        for p in self.train.iter().chain(&self.test) {
            if p.class_id >= self.classes.len() {
                return Err(Error::InvalidInput(format!(
                    "patch {} has class id {} outside the {}-class dataset",
                    p.id,
                    p.class_id,
                    self.classes.len()
                )));
            }
        }
        Ok(())
    }
}
