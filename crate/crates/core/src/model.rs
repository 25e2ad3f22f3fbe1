//! The assembled classifier: backbone features, prototype distance and
//! similarity maps, and head logits, wired through one tape so every stage
//! can differentiate exactly the parameters it trains.

use crate::backbone::{Backbone, BackboneConfig, TrainScope};
use crate::data::{whiten_into, ImagePatch, NormalizationStats};
use crate::error::{Error, Result};
use crate::img::Image;
use crate::prototype::{ClassifierHead, PrototypeLayer, PROTOTYPES_PER_CLASS, SIMILARITY_EPS};
use crate::tensor::{BnMode, Tape, Tensor, VarId};

/// Index of the largest value, first on ties.
pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Which training stage a forward pass serves; controls parameter freezing
/// and batch-norm statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Add-on and prototypes train; trunk and head frozen.
    Warmup,
    /// Everything but the head trains.
    Joint,
    /// Nothing trains; batch norm uses running statistics.
    Eval,
}

impl Stage {
    fn backbone_scope(self) -> TrainScope {
        match self {
            Stage::Warmup => TrainScope::AddonOnly,
            Stage::Joint => TrainScope::All,
            Stage::Eval => TrainScope::Frozen,
        }
    }

    fn bn_mode(self) -> BnMode {
        match self {
            Stage::Eval => BnMode::Eval,
            _ => BnMode::Train,
        }
    }

    fn prototypes_train(self) -> bool {
        !matches!(self, Stage::Eval)
    }
}

/// Tape variables produced by one forward pass.
pub struct ForwardPass {
    /// [n, D, g, g] add-on output.
    pub features: VarId,
    /// [n, P, g, g] squared distances.
    pub distances: VarId,
    /// [n, P] max similarity per prototype.
    pub scores: VarId,
    /// [n, K] class logits.
    pub logits: VarId,
    /// One leaf per backbone parameter, aligned with `backbone.params()`.
    pub backbone_leaves: Vec<VarId>,
    pub proto_leaf: VarId,
    pub head_leaf: VarId,
}

/// Backbone + prototype layer + head, with the class names and whitening
/// statistics the model was trained under.
pub struct ProtoPartsModel {
    pub backbone: Backbone,
    pub prototypes: PrototypeLayer,
    pub head: ClassifierHead,
    pub classes: Vec<String>,
    pub stats: NormalizationStats,
}

impl ProtoPartsModel {
    pub fn new(
        config: BackboneConfig,
        classes: Vec<String>,
        stats: NormalizationStats,
        per_class: usize,
        seed: u64,
    ) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "classifier needs at least 2 classes, got {}",
                classes.len()
            )));
        }
        let k = classes.len();
        let backbone = Backbone::new(config, seed)?;
        let dim = backbone.config().feature_dim;
        Ok(ProtoPartsModel {
            backbone,
            prototypes: PrototypeLayer::new(k, per_class, dim, seed)?,
            head: ClassifierHead::new(k, per_class)?,
            classes,
            stats,
        })
    }

    /// Default prototype count (10 per class).
    pub fn with_default_prototypes(
        config: BackboneConfig,
        classes: Vec<String>,
        stats: NormalizationStats,
        seed: u64,
    ) -> Result<Self> {
        ProtoPartsModel::new(config, classes, stats, PROTOTYPES_PER_CLASS, seed)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Whiten patches into a [n, 3, S, S] batch tensor.
    pub fn batch_tensor(&self, patches: &[&ImagePatch]) -> Result<Tensor> {
        if patches.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let s = self.backbone.config().input_size;
        let plane = 3 * s * s;
        let mut data = vec![0.0f32; patches.len() * plane];
        for (i, p) in patches.iter().enumerate() {
            if p.image.h() != s || p.image.w() != s {
                return Err(Error::InvalidInput(format!(
                    "patch {} is {}x{}, model expects {s}x{s}",
                    p.id,
                    p.image.h(),
                    p.image.w()
                )));
            }
            whiten_into(&p.image, &self.stats, &mut data[i * plane..(i + 1) * plane]);
        }
        Tensor::new(vec![patches.len(), 3, s, s], data)
    }

    /// Whiten one raw image into a [1, 3, S, S] batch tensor.
    pub fn image_tensor(&self, image: &Image) -> Result<Tensor> {
        let s = self.backbone.config().input_size;
        if image.h() != s || image.w() != s {
            return Err(Error::InvalidInput(format!(
                "image is {}x{}, model expects {s}x{s}",
                image.h(),
                image.w()
            )));
        }
        let mut data = vec![0.0f32; 3 * s * s];
        whiten_into(image, &self.stats, &mut data);
        Tensor::new(vec![1, 3, s, s], data)
    }

    /// Record the full forward computation for a whitened batch.
    pub fn forward(&mut self, tape: &mut Tape, batch: Tensor, stage: Stage) -> Result<ForwardPass> {
        let x = tape.leaf(batch);
        let (features, backbone_leaves) =
            self.backbone.forward(tape, x, stage.bn_mode(), stage.backbone_scope())?;
        let proto_leaf = tape.leaf(
            self.prototypes
                .prototypes
                .value
                .clone()
                .requires_grad(stage.prototypes_train()),
        );
        let head_leaf = tape.leaf(self.head.weight.value.clone().requires_grad(false));
        let distances = tape.proto_distance(features, proto_leaf)?;
        let sim_map = tape.log_similarity(distances, SIMILARITY_EPS)?;
        let scores = tape.spatial_max(sim_map)?;
        let logits = tape.dense(scores, head_leaf, None)?;
        Ok(ForwardPass { features, distances, scores, logits, backbone_leaves, proto_leaf, head_leaf })
    }

    /// Eval-mode class logits for a patch set, chunked at `batch_size`;
    /// row i holds the K logits of patch i.
    pub fn batch_logits(
        &mut self,
        patches: &[&ImagePatch],
        batch_size: usize,
    ) -> Result<Vec<Vec<f32>>> {
        if batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        let k = self.num_classes();
        let mut rows = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(batch_size) {
            let mut tape = Tape::new();
            let batch = self.batch_tensor(chunk)?;
            let pass = self.forward(&mut tape, batch, Stage::Eval)?;
            let logits = tape.value(pass.logits);
            for row in 0..chunk.len() {
                rows.push(logits.data()[row * k..(row + 1) * k].to_vec());
            }
        }
        Ok(rows)
    }

    /// Argmax class per patch, first index on ties. Runs in eval mode in
    /// chunks of `batch_size`.
    pub fn predict(&mut self, patches: &[&ImagePatch], batch_size: usize) -> Result<Vec<usize>> {
        Ok(self.batch_logits(patches, batch_size)?.iter().map(|row| argmax(row)).collect())
    }

    /// Fraction of patches whose argmax class matches the label.
    pub fn accuracy(&mut self, patches: &[&ImagePatch], batch_size: usize) -> Result<f32> {
        if patches.is_empty() {
            return Err(Error::Empty("evaluation set"));
        }
        let preds = self.predict(patches, batch_size)?;
        let correct = preds
            .iter()
            .zip(patches)
            .filter(|(pred, p)| **pred == p.class_id)
            .count();
        Ok(correct as f32 / patches.len() as f32)
    }
}
