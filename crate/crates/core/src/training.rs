//! Staged optimization: warm-up, joint training with cluster and separation
//! costs, periodic prototype pushes, and a convex last-layer stage with
//! off-class L1 sparsity. Also hosts the non-interpretable baseline trained
//! under the same budget for comparison runs.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, TrainScope};
use crate::data::{Dataset, ImagePatch, NormalizationStats};
use crate::error::{Error, Result};
use crate::model::{argmax, ForwardPass, ProtoPartsModel, Stage};
use crate::prototype::PushProvenance;
use crate::rng;
use crate::tensor::{BnMode, OptimizerSpec, Param, Tape, Tensor, VarId};

const STAGE_WARMUP: u64 = 0;
const STAGE_JOINT: u64 = 1;
const STAGE_LAST: u64 = 2;
const STAGE_BASELINE: u64 = 3;

/// Prototypes stay strictly inside the unit cube; steps are projected back.
const PROTO_CLAMP: f32 = 1e-6;

/// Hyperparameters of the full schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs_warmup: usize,
    pub epochs_joint: usize,
    /// Push prototypes after every this many joint epochs; a final push
    /// always runs at the end of the joint stage.
    pub push_every: usize,
    pub epochs_last_layer: usize,
    pub lambda_cluster: f32,
    pub lambda_separation: f32,
    pub lambda_l1: f32,
    pub batch_size: usize,
    pub warmup_opt: OptimizerSpec,
    pub joint_opt: OptimizerSpec,
    pub last_opt: OptimizerSpec,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_warmup: 3,
            epochs_joint: 30,
            push_every: 10,
            epochs_last_layer: 10,
            lambda_cluster: 0.8,
            lambda_separation: 0.08,
            lambda_l1: 1e-4,
            batch_size: 32,
            warmup_opt: OptimizerSpec::adam(3e-3),
            joint_opt: OptimizerSpec::adam(1e-3),
            last_opt: OptimizerSpec::adam(1e-2),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_cluster < 0.0 || self.lambda_separation < 0.0 || self.lambda_l1 < 0.0 {
            return Err(Error::InvalidConfig("loss weights must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.push_every == 0 {
            return Err(Error::InvalidConfig("push_every must be positive".into()));
        }
        if self.epochs_joint > 0 && self.push_every > self.epochs_joint {
            return Err(Error::InvalidConfig(format!(
                "push_every {} exceeds epochs_joint {}; the joint stage must push at least once",
                self.push_every, self.epochs_joint
            )));
        }
        Ok(())
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub loss: f32,
    pub ce: f32,
    pub cluster: f32,
    pub separation: f32,
    pub l1: f32,
    pub train_accuracy: f32,
    pub val_accuracy: f32,
}

/// Loss variables of one batch: total = ce + λ_clst·cluster − λ_sep·separation.
pub struct LossTerms {
    pub total: VarId,
    pub ce: VarId,
    pub cluster: Option<VarId>,
    pub separation: Option<VarId>,
}

/// Assemble the joint objective on the tape. Terms with a zero weight are
/// skipped entirely, so with both λ at 0 the total is exactly the
/// cross-entropy.
pub fn joint_loss(
    tape: &mut Tape,
    pass: &ForwardPass,
    labels: &[usize],
    class_map: &[usize],
    lambda_cluster: f32,
    lambda_separation: f32,
) -> Result<LossTerms> {
    if lambda_cluster < 0.0 || lambda_separation < 0.0 {
        return Err(Error::InvalidConfig("loss weights must be non-negative".into()));
    }
    let ce = tape.softmax_cross_entropy(pass.logits, labels)?;
    let mut terms = vec![(ce, 1.0f32)];
    let cluster = if lambda_cluster > 0.0 {
        let c = tape.min_class_distance(pass.distances, labels, class_map, true)?;
        terms.push((c, lambda_cluster));
        Some(c)
    } else {
        None
    };
    let separation = if lambda_separation > 0.0 {
        let s = tape.min_class_distance(pass.distances, labels, class_map, false)?;
        terms.push((s, -lambda_separation));
        Some(s)
    } else {
        None
    };
    let total = tape.affine(&terms)?;
    Ok(LossTerms { total, ce, cluster, separation })
}

struct EpochStats {
    loss: f32,
    ce: f32,
    cluster: f32,
    separation: f32,
    accuracy: f32,
}

fn shuffled(len: usize, seed: u64, stage: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut rng::stream(seed, &[rng::TAG_SHUFFLE, stage, epoch as u64]));
    idx
}

fn check_finite(value: f32, stage: &str, epoch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { context: format!("loss diverged in {stage} epoch {epoch}") })
    }
}

/// Prefix divergence errors with the stage and epoch that produced them.
fn stage_context(e: Error, stage: &str, epoch: usize) -> Error {
    match e {
        Error::NonFinite { context } => {
            Error::NonFinite { context: format!("{stage} epoch {epoch}: {context}") }
        }
        other => other,
    }
}

fn batch_accuracy(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|(row, &label)| argmax(&logits.data()[row * k..(row + 1) * k]) == label)
        .count()
}

/// One epoch of warm-up or joint training; applies optimizer steps and
/// returns the sample-weighted mean loss terms and training accuracy.
fn supervised_epoch(
    model: &mut ProtoPartsModel,
    train: &[&ImagePatch],
    stage: Stage,
    stage_name: &str,
    stage_tag: u64,
    epoch: usize,
    opt: &OptimizerSpec,
    cfg: &TrainConfig,
) -> Result<EpochStats> {
    let class_map = model.prototypes.class_map();
    let order = shuffled(train.len(), cfg.seed, stage_tag, epoch);
    let total = train.len() as f64;
    let (mut loss_sum, mut ce_sum, mut cl_sum, mut sep_sum) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut correct = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        let refs: Vec<&ImagePatch> = chunk.iter().map(|&i| train[i]).collect();
        let labels: Vec<usize> = refs.iter().map(|p| p.class_id).collect();
        let batch = model.batch_tensor(&refs)?;
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, batch, stage)?;
        let loss =
            joint_loss(&mut tape, &pass, &labels, &class_map, cfg.lambda_cluster, cfg.lambda_separation)?;
        let lv = tape.value(loss.total).item()?;
        check_finite(lv, stage_name, epoch)?;
        let n = refs.len() as f64;
        loss_sum += lv as f64 * n;
        ce_sum += tape.value(loss.ce).item()? as f64 * n;
        if let Some(c) = loss.cluster {
            cl_sum += tape.value(c).item()? as f64 * n;
        }
        if let Some(s) = loss.separation {
            sep_sum += tape.value(s).item()? as f64 * n;
        }
        correct += batch_accuracy(tape.value(pass.logits), &labels);
        let backbone_leaves = pass.backbone_leaves.clone();
        let proto_leaf = pass.proto_leaf;
        let grads = tape.backward(loss.total)?;
        for (i, leaf) in backbone_leaves.iter().enumerate() {
            if let Some(g) = grads.get(*leaf) {
                opt.step(&mut model.backbone.params_mut()[i], g)
                    .map_err(|e| stage_context(e, stage_name, epoch))?;
            }
        }
        if let Some(g) = grads.get(proto_leaf) {
            opt.step(&mut model.prototypes.prototypes, g)
                .map_err(|e| stage_context(e, stage_name, epoch))?;
            for v in model.prototypes.prototypes.value.data_mut() {
                *v = v.clamp(PROTO_CLAMP, 1.0 - PROTO_CLAMP);
            }
        }
    }
    Ok(EpochStats {
        loss: (loss_sum / total) as f32,
        ce: (ce_sum / total) as f32,
        cluster: (cl_sum / total) as f32,
        separation: (sep_sum / total) as f32,
        accuracy: correct as f32 / train.len() as f32,
    })
}

/// Snap every prototype to the nearest latent patch among own-class training
/// images and record the provenance. Scan order (image order given, then
/// row-major cell) breaks ties; callers pass images in id order.
pub fn push_prototypes(
    model: &mut ProtoPartsModel,
    base: &[&ImagePatch],
    batch_size: usize,
) -> Result<()> {
    if base.is_empty() {
        return Err(Error::Empty("training set for prototype push"));
    }
    for class in 0..model.num_classes() {
        if !base.iter().any(|p| p.class_id == class) {
            return Err(Error::InvalidInput(format!(
                "class {class} has no training images to push from"
            )));
        }
    }
    struct Best {
        dist: f32,
        image: usize,
        cell: usize,
        vector: Vec<f32>,
    }
    let p_count = model.prototypes.count();
    let dim = model.prototypes.dim();
    let grid = model.backbone.config().grid();
    let cells = grid * grid;
    let mut best: Vec<Option<Best>> = (0..p_count).map(|_| None).collect();
    let mut offset = 0usize;
    for chunk in base.chunks(batch_size.max(1)) {
        let batch = model.batch_tensor(chunk)?;
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, batch, Stage::Eval)?;
        let feats = tape.value(pass.features).data();
        let dists = tape.value(pass.distances).data();
        for (row, patch) in chunk.iter().enumerate() {
            for p in 0..p_count {
                if model.prototypes.class_of(p) != patch.class_id {
                    continue;
                }
                let map = &dists[(row * p_count + p) * cells..][..cells];
                for (cell, &d) in map.iter().enumerate() {
                    if best[p].as_ref().is_none_or(|b| d < b.dist) {
                        let mut vector = vec![0.0f32; dim];
                        for (ch, slot) in vector.iter_mut().enumerate() {
                            *slot = feats[(row * dim + ch) * cells + cell];
                        }
                        best[p] = Some(Best { dist: d, image: offset + row, cell, vector });
                    }
                }
            }
        }
        offset += chunk.len();
    }
    let size = model.backbone.config().input_size;
    for (p, slot) in best.into_iter().enumerate() {
        let b = slot.expect("every class has at least one image");
        let patch = base[b.image];
        let cell = (b.cell / grid, b.cell % grid);
        let (y0, y1, x0, x1) = model.backbone.config().receptive_field(cell.0, cell.1).clamped(size);
        let prov = PushProvenance {
            train_image_id: patch.id.clone(),
            latent_cell: cell,
            input_rectangle: (y0, y1, x0, x1),
            patch_pixels: patch.image.crop(y0, x0, y1 - y0, x1 - x0)?,
            source_image: patch.image.clone(),
        };
        model.prototypes.set_pushed(p, &b.vector, prov)?;
    }
    model.prototypes.prototypes.reset_state();
    Ok(())
}

/// Convex refinement of the head on frozen prototype scores: CE plus
/// λ_L1 · Σ|w| over off-class entries only. Scores are computed once and
/// cached, since everything upstream of the head is frozen.
pub fn train_last_layer(
    model: &mut ProtoPartsModel,
    train: &[&ImagePatch],
    test: &[&ImagePatch],
    cfg: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    if train.is_empty() {
        return Err(Error::Empty("training set for last-layer stage"));
    }
    let p_count = model.prototypes.count();
    let mut cached = Vec::with_capacity(train.len() * p_count);
    let mut labels = Vec::with_capacity(train.len());
    for chunk in train.chunks(cfg.batch_size) {
        let batch = model.batch_tensor(chunk)?;
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, batch, Stage::Eval)?;
        cached.extend_from_slice(tape.value(pass.scores).data());
        labels.extend(chunk.iter().map(|p| p.class_id));
    }
    let mask = model.head.off_class_mask();
    model.head.weight.reset_state();
    let mut records = Vec::new();
    for epoch in 1..=cfg.epochs_last_layer {
        let order = shuffled(train.len(), cfg.seed, STAGE_LAST, epoch);
        let (mut loss_sum, mut ce_sum, mut l1_sum) = (0.0f64, 0.0f64, 0.0f64);
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let n = chunk.len();
            let mut xs = vec![0.0f32; n * p_count];
            let mut ys = Vec::with_capacity(n);
            for (row, &i) in chunk.iter().enumerate() {
                xs[row * p_count..(row + 1) * p_count]
                    .copy_from_slice(&cached[i * p_count..(i + 1) * p_count]);
                ys.push(labels[i]);
            }
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(vec![n, p_count], xs)?);
            let w = tape.leaf(model.head.weight.value.clone());
            let logits = tape.dense(x, w, None)?;
            let ce = tape.softmax_cross_entropy(logits, &ys)?;
            let (total, l1_value) = if cfg.lambda_l1 > 0.0 {
                let l1 = tape.l1_masked(w, &mask)?;
                let l1v = tape.value(l1).item()?;
                (tape.affine(&[(ce, 1.0), (l1, cfg.lambda_l1)])?, l1v)
            } else {
                (tape.affine(&[(ce, 1.0)])?, 0.0)
            };
            let lv = tape.value(total).item()?;
            check_finite(lv, "last", epoch)?;
            let nf = n as f64;
            loss_sum += lv as f64 * nf;
            ce_sum += tape.value(ce).item()? as f64 * nf;
            l1_sum += l1_value as f64 * nf;
            correct += batch_accuracy(tape.value(logits), &ys);
            let grads = tape.backward(total)?;
            if let Some(g) = grads.get(w) {
                cfg.last_opt
                    .step(&mut model.head.weight, g)
                    .map_err(|e| stage_context(e, "last", epoch))?;
            }
        }
        let total_n = train.len() as f64;
        records.push(EpochRecord {
            stage: "last".into(),
            epoch,
            loss: (loss_sum / total_n) as f32,
            ce: (ce_sum / total_n) as f32,
            cluster: 0.0,
            separation: 0.0,
            l1: (l1_sum / total_n) as f32,
            train_accuracy: correct as f32 / train.len() as f32,
            val_accuracy: model.accuracy(test, cfg.batch_size)?,
        });
    }
    Ok(records)
}

fn reset_optimizer_state(model: &mut ProtoPartsModel) {
    for p in model.backbone.params_mut() {
        p.reset_state();
    }
    model.prototypes.prototypes.reset_state();
    model.head.weight.reset_state();
}

fn push_record(
    model: &mut ProtoPartsModel,
    epoch: usize,
    base: &[&ImagePatch],
    test: &[&ImagePatch],
    batch_size: usize,
) -> Result<EpochRecord> {
    Ok(EpochRecord {
        stage: "push".into(),
        epoch,
        loss: 0.0,
        ce: 0.0,
        cluster: 0.0,
        separation: 0.0,
        l1: 0.0,
        train_accuracy: model.accuracy(base, batch_size)?,
        val_accuracy: model.accuracy(test, batch_size)?,
    })
}

/// Run the full schedule: warm-up → joint with periodic pushes → final push
/// → last layer. Returns one history record per epoch (plus one per push).
pub fn fit(model: &mut ProtoPartsModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    dataset.validate()?;
    if dataset.classes != model.classes {
        return Err(Error::InvalidInput(format!(
            "dataset classes {:?} do not match model classes {:?}",
            dataset.classes, model.classes
        )));
    }
    if dataset.train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if dataset.test.is_empty() {
        return Err(Error::Empty("test split"));
    }
    let train: Vec<&ImagePatch> = dataset.train.iter().collect();
    let test: Vec<&ImagePatch> = dataset.test.iter().collect();
    let base = dataset.base_train();
    let mut history = Vec::new();
    reset_optimizer_state(model);
    for epoch in 1..=cfg.epochs_warmup {
        let s = supervised_epoch(
            model,
            &train,
            Stage::Warmup,
            "warmup",
            STAGE_WARMUP,
            epoch,
            &cfg.warmup_opt,
            cfg,
        )?;
        history.push(EpochRecord {
            stage: "warmup".into(),
            epoch,
            loss: s.loss,
            ce: s.ce,
            cluster: s.cluster,
            separation: s.separation,
            l1: 0.0,
            train_accuracy: s.accuracy,
            val_accuracy: model.accuracy(&test, cfg.batch_size)?,
        });
    }
    reset_optimizer_state(model);
    let mut last_push_epoch = None;
    for epoch in 1..=cfg.epochs_joint {
        let s = supervised_epoch(
            model,
            &train,
            Stage::Joint,
            "joint",
            STAGE_JOINT,
            epoch,
            &cfg.joint_opt,
            cfg,
        )?;
        history.push(EpochRecord {
            stage: "joint".into(),
            epoch,
            loss: s.loss,
            ce: s.ce,
            cluster: s.cluster,
            separation: s.separation,
            l1: 0.0,
            train_accuracy: s.accuracy,
            val_accuracy: model.accuracy(&test, cfg.batch_size)?,
        });
        if epoch % cfg.push_every == 0 {
            push_prototypes(model, &base, cfg.batch_size)?;
            history.push(push_record(model, epoch, &base, &test, cfg.batch_size)?);
            last_push_epoch = Some(epoch);
        }
    }
    if last_push_epoch != Some(cfg.epochs_joint) {
        push_prototypes(model, &base, cfg.batch_size)?;
        history.push(push_record(model, cfg.epochs_joint, &base, &test, cfg.batch_size)?);
    }
    history.extend(train_last_layer(model, &train, &test, cfg)?);
    Ok(history)
}

/// Plain CNN classifier trained under the same budget: the same backbone,
/// global average pooling, and a dense layer, with cross-entropy only.
pub struct BaselineModel {
    pub backbone: Backbone,
    pub head_w: Param,
    pub head_b: Param,
    pub classes: Vec<String>,
    pub stats: NormalizationStats,
}

impl BaselineModel {
    pub fn new(
        config: BackboneConfig,
        classes: Vec<String>,
        stats: NormalizationStats,
        seed: u64,
    ) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "classifier needs at least 2 classes, got {}",
                classes.len()
            )));
        }
        let backbone = Backbone::new(config, seed)?;
        let d = backbone.config().feature_dim;
        let k = classes.len();
        let normal = Normal::new(0.0f32, (2.0 / d as f32).sqrt()).unwrap();
        let mut r = rng::stream(seed, &[rng::TAG_INIT, u64::from_be_bytes(*b"baseline")]);
        let w: Vec<f32> = (0..k * d).map(|_| normal.sample(&mut r)).collect();
        Ok(BaselineModel {
            backbone,
            head_w: Param::new("baseline.head.weight", Tensor::new(vec![k, d], w)?),
            head_b: Param::new("baseline.head.bias", Tensor::zeros(vec![k])),
            classes,
            stats,
        })
    }

    fn batch_tensor(&self, patches: &[&ImagePatch]) -> Result<Tensor> {
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
            crate::data::whiten_into(&p.image, &self.stats, &mut data[i * plane..(i + 1) * plane]);
        }
        Tensor::new(vec![patches.len(), 3, s, s], data)
    }

    fn forward(
        &mut self,
        tape: &mut Tape,
        batch: Tensor,
        train: bool,
    ) -> Result<(VarId, Vec<VarId>, VarId, VarId)> {
        let x = tape.leaf(batch);
        let (scope, mode) = if train {
            (TrainScope::All, BnMode::Train)
        } else {
            (TrainScope::Frozen, BnMode::Eval)
        };
        let (features, leaves) = self.backbone.forward(tape, x, mode, scope)?;
        let pooled = tape.global_avg_pool(features)?;
        let w = tape.leaf(self.head_w.value.clone().requires_grad(train));
        let b = tape.leaf(self.head_b.value.clone().requires_grad(train));
        let logits = tape.dense(pooled, w, Some(b))?;
        Ok((logits, leaves, w, b))
    }

    /// Eval-mode class logits for a patch set, chunked at `batch_size`;
    /// row i holds the K logits of patch i.
    pub fn batch_logits(
        &mut self,
        patches: &[&ImagePatch],
        batch_size: usize,
    ) -> Result<Vec<Vec<f32>>> {
        let k = self.classes.len();
        let mut rows = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(batch_size.max(1)) {
            let batch = self.batch_tensor(chunk)?;
            let mut tape = Tape::new();
            let (logits, ..) = self.forward(&mut tape, batch, false)?;
            let data = tape.value(logits).data();
            for row in 0..chunk.len() {
                rows.push(data[row * k..(row + 1) * k].to_vec());
            }
        }
        Ok(rows)
    }

    pub fn predict(&mut self, patches: &[&ImagePatch], batch_size: usize) -> Result<Vec<usize>> {
        Ok(self.batch_logits(patches, batch_size)?.iter().map(|row| argmax(row)).collect())
    }

    pub fn accuracy(&mut self, patches: &[&ImagePatch], batch_size: usize) -> Result<f32> {
        if patches.is_empty() {
            return Err(Error::Empty("evaluation set"));
        }
        let preds = self.predict(patches, batch_size)?;
        let correct = preds.iter().zip(patches).filter(|(q, p)| **q == p.class_id).count();
        Ok(correct as f32 / patches.len() as f32)
    }
}

/// Train the baseline for the proto model's total epoch budget with the
/// joint-stage optimizer and plain cross-entropy.
pub fn fit_baseline(
    model: &mut BaselineModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    dataset.validate()?;
    if dataset.classes != model.classes {
        return Err(Error::InvalidInput("dataset classes do not match model classes".into()));
    }
    if dataset.train.is_empty() || dataset.test.is_empty() {
        return Err(Error::Empty("dataset split"));
    }
    let train: Vec<&ImagePatch> = dataset.train.iter().collect();
    let test: Vec<&ImagePatch> = dataset.test.iter().collect();
    let epochs = cfg.epochs_warmup + cfg.epochs_joint + cfg.epochs_last_layer;
    let mut history = Vec::new();
    for p in model.backbone.params_mut() {
        p.reset_state();
    }
    model.head_w.reset_state();
    model.head_b.reset_state();
    for epoch in 1..=epochs {
        let order = shuffled(train.len(), cfg.seed, STAGE_BASELINE, epoch);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&ImagePatch> = chunk.iter().map(|&i| train[i]).collect();
            let labels: Vec<usize> = refs.iter().map(|p| p.class_id).collect();
            let batch = model.batch_tensor(&refs)?;
            let mut tape = Tape::new();
            let (logits, leaves, w, b) = model.forward(&mut tape, batch, true)?;
            let ce = tape.softmax_cross_entropy(logits, &labels)?;
            let lv = tape.value(ce).item()?;
            check_finite(lv, "baseline", epoch)?;
            loss_sum += lv as f64 * refs.len() as f64;
            correct += batch_accuracy(tape.value(logits), &labels);
            let grads = tape.backward(ce)?;
            for (i, leaf) in leaves.iter().enumerate() {
                if let Some(g) = grads.get(*leaf) {
                    cfg.joint_opt
                        .step(&mut model.backbone.params_mut()[i], g)
                        .map_err(|e| stage_context(e, "baseline", epoch))?;
                }
            }
            if let Some(g) = grads.get(w) {
                cfg.joint_opt
                    .step(&mut model.head_w, g)
                    .map_err(|e| stage_context(e, "baseline", epoch))?;
            }
            if let Some(g) = grads.get(b) {
                cfg.joint_opt
                    .step(&mut model.head_b, g)
                    .map_err(|e| stage_context(e, "baseline", epoch))?;
            }
        }
        let ce_mean = (loss_sum / train.len() as f64) as f32;
        history.push(EpochRecord {
            stage: "baseline".into(),
            epoch,
            loss: ce_mean,
            ce: ce_mean,
            cluster: 0.0,
            separation: 0.0,
            l1: 0.0,
            train_accuracy: correct as f32 / train.len() as f32,
            val_accuracy: model.accuracy(&test, cfg.batch_size)?,
        });
    }
    Ok(history)
}
