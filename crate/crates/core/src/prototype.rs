//! Class-specific prototype vectors, the log-ratio similarity, and the
//! fully-connected classifier head.
//!
//! Prototypes live in the sigmoid-bounded feature space (0,1)^D, ten per
//! class by default. After a push step each prototype is an exact copy of a
//! latent patch from an own-class training image, with provenance recording
//! which patch.

use rand::Rng;

use crate::error::{Error, Result};
use crate::img::Image;
use crate::rng;
use crate::tensor::{Param, Tensor};

/// ε in the similarity log((d+1)/(d+ε)).
pub const SIMILARITY_EPS: f32 = 1e-4;
/// Default number of prototypes per class.
pub const PROTOTYPES_PER_CLASS: usize = 10;

/// Maximum attainable similarity, log(1/ε), reached only at distance 0.
pub fn max_similarity() -> f32 {
    (1.0 / SIMILARITY_EPS).ln()
}

/// Log-ratio similarity of a squared distance.
pub fn similarity(d: f32) -> Result<f32> {
    if d < 0.0 {
        return Err(Error::InvalidInput(format!("similarity needs a non-negative distance, got {d}")));
    }
    Ok((d + 1.0).ln() - (d + SIMILARITY_EPS).ln())
}

/// Where a pushed prototype came from.
#[derive(Debug, Clone, PartialEq)]
pub struct PushProvenance {
    pub train_image_id: String,
    /// Feature-grid cell (row, column) whose latent vector was copied.
    pub latent_cell: (usize, usize),
    /// Input-pixel rectangle (y0, y1, x0, x1), half-open, clamped to the
    /// image.
    pub input_rectangle: (usize, usize, usize, usize),
    /// Pixel crop of the rectangle from the training image.
    pub patch_pixels: Image,
    /// The full training image, kept so explanations can re-evaluate the
    /// prototype under pixel-space perturbations without the dataset on disk.
    pub source_image: Image,
}

/// The P×D prototype bank plus per-prototype push provenance.
pub struct PrototypeLayer {
    classes: usize,
    per_class: usize,
    dim: usize,
    pub prototypes: Param,
    provenance: Vec<Option<PushProvenance>>,
}

impl PrototypeLayer {
    /// Seeded uniform initialization strictly inside (0,1)^D.
    pub fn new(classes: usize, per_class: usize, dim: usize, seed: u64) -> Result<Self> {
        if classes == 0 || per_class == 0 || dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "prototype layer needs positive classes/per_class/dim, got {classes}/{per_class}/{dim}"
            )));
        }
        let count = classes * per_class;
        let mut rng = rng::stream(seed, &[rng::TAG_INIT, count as u64, dim as u64]);
        let data: Vec<f32> = (0..count * dim).map(|_| rng.gen::<f32>().max(f32::EPSILON)).collect();
        Ok(PrototypeLayer {
            classes,
            per_class,
            dim,
            prototypes: Param::new("prototypes", Tensor::new(vec![count, dim], data)?),
            provenance: (0..count).map(|_| None).collect(),
        })
    }

    pub fn count(&self) -> usize {
        self.classes * self.per_class
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn per_class(&self) -> usize {
        self.per_class
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Class that prototype `p` belongs to.
    pub fn class_of(&self, p: usize) -> usize {
        p / self.per_class
    }

    /// Class ownership for every prototype, in order.
    pub fn class_map(&self) -> Vec<usize> {
        (0..self.count()).map(|p| self.class_of(p)).collect()
    }

    pub fn vector(&self, p: usize) -> &[f32] {
        &self.prototypes.value.data()[p * self.dim..(p + 1) * self.dim]
    }

    pub fn provenance(&self) -> &[Option<PushProvenance>] {
        &self.provenance
    }

    /// Overwrite prototype `p` with a pushed latent vector and record where
    /// it came from. Clears stale optimizer state.
    pub fn set_pushed(&mut self, p: usize, vector: &[f32], prov: PushProvenance) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::shape(
                "set_pushed",
                format!("vector length {} vs dim {}", vector.len(), self.dim),
            ));
        }
        self.prototypes.value.data_mut()[p * self.dim..(p + 1) * self.dim].copy_from_slice(vector);
        self.provenance[p] = Some(prov);
        Ok(())
    }

    pub fn all_pushed(&self) -> bool {
        self.provenance.iter().all(Option::is_some)
    }

    /// Fraction of distinct (train image, latent cell) pairs among the
    /// pushed prototypes; 1.0 means no two prototypes share a patch.
    pub fn diversity(&self) -> Result<f32> {
        let mut seen = std::collections::HashSet::new();
        for (index, prov) in self.provenance.iter().enumerate() {
            let p = prov.as_ref().ok_or(Error::MissingProvenance { prototype: index })?;
            seen.insert((p.train_image_id.as_str(), p.latent_cell));
        }
        Ok(seen.len() as f32 / self.count() as f32)
    }
}

/// Highest-similarity cell per (image, prototype) of a distance map
/// [n, P, gh, gw]: returns similarity scores [n, P] and the argmax cell for
/// each, first in row-major order on ties.
pub fn top_activation(dist: &Tensor) -> Result<(Tensor, Vec<(usize, usize)>)> {
    let shape = dist.shape();
    if shape.len() != 4 {
        return Err(Error::shape("top_activation", format!("expected 4-d distance map, got {shape:?}")));
    }
    let (n, p, gh, gw) = (shape[0], shape[1], shape[2], shape[3]);
    let cells = gh * gw;
    let mut scores = vec![0.0f32; n * p];
    let mut argmax = Vec::with_capacity(n * p);
    for g in 0..n * p {
        let map = &dist.data()[g * cells..(g + 1) * cells];
        let mut best = 0usize;
        for (i, &d) in map.iter().enumerate() {
            if d < map[best] {
                best = i;
            }
        }
        scores[g] = similarity(map[best])?;
        argmax.push((best / gw, best % gw));
    }
    Ok((Tensor::new(vec![n, p], scores)?, argmax))
}

/// Final linear layer: K×P weights, no bias.
pub struct ClassifierHead {
    classes: usize,
    per_class: usize,
    pub weight: Param,
}

impl ClassifierHead {
    /// Initialize w[k][j] = 1 for own-class prototypes, −0.5 otherwise.
    pub fn new(classes: usize, per_class: usize) -> Result<Self> {
        if classes == 0 || per_class == 0 {
            return Err(Error::InvalidConfig("head needs positive classes and per_class".into()));
        }
        let p = classes * per_class;
        let value = Tensor::from_fn(vec![classes, p], |i| {
            if (i % p) / per_class == i / p {
                1.0
            } else {
                -0.5
            }
        });
        Ok(ClassifierHead { classes, per_class, weight: Param::new("head.weight", value) })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn prototype_count(&self) -> usize {
        self.classes * self.per_class
    }

    /// Mask that is 1 on off-class weights and 0 on own-class weights; the
    /// sparsity penalty applies only where the mask is 1.
    pub fn off_class_mask(&self) -> Tensor {
        let p = self.prototype_count();
        Tensor::from_fn(vec![self.classes, p], |i| {
            if (i % p) / self.per_class == i / p {
                0.0
            } else {
                1.0
            }
        })
    }

    /// scores [n, P] → logits [n, K] without touching a tape.
    pub fn logits(&self, scores: &Tensor) -> Result<Tensor> {
        let shape = scores.shape();
        let p = self.prototype_count();
        if shape.len() != 2 || shape[1] != p {
            return Err(Error::shape("logits", format!("expected [n, {p}] scores, got {shape:?}")));
        }
        let n = shape[0];
        let mut out = vec![0.0f32; n * self.classes];
        crate::tensor::kernels::dense_forward(
            scores.data(),
            self.weight.value.data(),
            None,
            n,
            p,
            self.classes,
            &mut out,
        );
        Tensor::new(vec![n, self.classes], out)
    }

    /// Mean absolute off-class weight, the quantity the sparsity stage
    /// drives down.
    pub fn mean_off_class_weight(&self) -> f32 {
        let mask = self.off_class_mask();
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for (w, m) in self.weight.value.data().iter().zip(mask.data()) {
            if *m != 0.0 {
                sum += w.abs() as f64;
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            (sum / count as f64) as f32
        }
    }
}
