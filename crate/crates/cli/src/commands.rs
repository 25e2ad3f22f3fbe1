//! Subcommand implementations: each reads its inputs, runs one pipeline
//! stage, and leaves artifacts in the output directory.

use std::fs;
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use protoparts_core::checkpoint::{self, CheckpointKind};
use protoparts_core::data::{synth_dataset, ImagePatch};
use protoparts_core::embedding::{activation_vectors, embed_points, embedding_csv, knn_purity};
use protoparts_core::explain::{explain, report_json, Heatmap};
use protoparts_core::metrics::evaluate_predictions;
use protoparts_core::model::ProtoPartsModel;
use protoparts_core::training::{fit, fit_baseline, push_prototypes, BaselineModel};

use crate::config::RunConfig;
use crate::dataset_io::{read_dataset, save_png, write_dataset};
use crate::plot::scatter_png;

/// Checkpoint filename written by `train`.
pub const MODEL_FILE: &str = "model.ppks";
/// Checkpoint filename written by `train-baseline`.
pub const BASELINE_FILE: &str = "baseline.ppks";
/// Checkpoint filename written by `push`.
pub const PUSHED_FILE: &str = "pushed.ppks";

/// Which dataset split a command evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalSplit {
    Train,
    Test,
}

impl std::fmt::Display for EvalSplit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalSplit::Train => "train",
            EvalSplit::Test => "test",
        })
    }
}

/// Closing entry of `training-log.json`, also stored in the checkpoint
/// header metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub model: String,
    /// History records emitted: one per epoch plus one per push.
    pub records: usize,
    pub final_train_accuracy: f32,
    pub final_val_accuracy: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prototype_diversity: Option<f32>,
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn ensure_same_classes(model: &[String], dataset: &[String]) -> anyhow::Result<()> {
    anyhow::ensure!(
        model == dataset,
        "checkpoint classes {model:?} do not match dataset classes {dataset:?}"
    );
    Ok(())
}

fn load_model(path: &Path) -> anyhow::Result<(ProtoPartsModel, serde_json::Value)> {
    checkpoint::read_model(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_baseline(path: &Path) -> anyhow::Result<(BaselineModel, serde_json::Value)> {
    checkpoint::read_baseline(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_header(path: &Path) -> anyhow::Result<checkpoint::CheckpointHeader> {
    checkpoint::inspect_file(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn synth(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let dataset = synth_dataset(&cfg.dataset)?;
    let root = out.join("dataset");
    write_dataset(&root, &dataset, &cfg.dataset)?;
    let counts = cfg.dataset.counts();
    println!(
        "wrote {}: {} train images ({} before augmentation), {} test, {} classes",
        root.display(),
        counts.augmented_train,
        counts.train,
        counts.test,
        dataset.classes.len()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path) -> anyhow::Result<()> {
    let (dataset, _) = read_dataset(data)?;
    let mut model = ProtoPartsModel::new(
        cfg.backbone.clone(),
        dataset.classes.clone(),
        dataset.stats.clone(),
        cfg.prototypes_per_class,
        cfg.train.seed,
    )?;
    let records = fit(&mut model, &dataset, &cfg.train)?;
    let last = records.last().context("training produced no history")?;
    let summary = TrainingSummary {
        model: "prototype".into(),
        records: records.len(),
        final_train_accuracy: last.train_accuracy,
        final_val_accuracy: last.val_accuracy,
        prototype_diversity: Some(model.prototypes.diversity()?),
    };
    write_json(&out.join("training-log.json"), &records)?;
    write_json(&out.join("training-summary.json"), &summary)?;
    let metadata = serde_json::json!({ "run_config": cfg, "summary": summary });
    let path = out.join(MODEL_FILE);
    checkpoint::write_model(&path, &model, metadata)?;
    println!(
        "trained prototype model: val accuracy {:.4}, diversity {:.4} -> {}",
        summary.final_val_accuracy,
        summary.prototype_diversity.unwrap_or(f32::NAN),
        path.display()
    );
    Ok(())
}

pub fn train_baseline(cfg: &RunConfig, data: &Path, out: &Path) -> anyhow::Result<()> {
    let (dataset, _) = read_dataset(data)?;
    let mut model = BaselineModel::new(
        cfg.backbone.clone(),
        dataset.classes.clone(),
        dataset.stats.clone(),
        cfg.train.seed,
    )?;
    let records = fit_baseline(&mut model, &dataset, &cfg.train)?;
    let last = records.last().context("training produced no history")?;
    let summary = TrainingSummary {
        model: "baseline".into(),
        records: records.len(),
        final_train_accuracy: last.train_accuracy,
        final_val_accuracy: last.val_accuracy,
        prototype_diversity: None,
    };
    write_json(&out.join("training-log.json"), &records)?;
    write_json(&out.join("training-summary.json"), &summary)?;
    let metadata = serde_json::json!({ "run_config": cfg, "summary": summary });
    let path = out.join(BASELINE_FILE);
    checkpoint::write_baseline(&path, &model, metadata)?;
    println!(
        "trained baseline model: val accuracy {:.4} -> {}",
        summary.final_val_accuracy,
        path.display()
    );
    Ok(())
}

pub fn push(cfg: &RunConfig, checkpoint_path: &Path, data: &Path, out: &Path) -> anyhow::Result<()> {
    let (mut model, metadata) = load_model(checkpoint_path)?;
    let (dataset, _) = read_dataset(data)?;
    ensure_same_classes(&model.classes, &dataset.classes)?;
    let base = dataset.base_train();
    push_prototypes(&mut model, &base, cfg.eval_batch)?;
    let path = out.join(PUSHED_FILE);
    checkpoint::write_model(&path, &model, metadata)?;
    println!(
        "pushed {} prototypes onto {} training patches -> {}",
        model.prototypes.count(),
        base.len(),
        path.display()
    );
    Ok(())
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn eval(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    data: &Path,
    split: EvalSplit,
    out: &Path,
) -> anyhow::Result<()> {
    let header = load_header(checkpoint_path)?;
    let (dataset, _) = read_dataset(data)?;
    ensure_same_classes(&header.classes, &dataset.classes)?;
    let patches: Vec<&ImagePatch> = match split {
        EvalSplit::Train => dataset.train.iter().collect(),
        EvalSplit::Test => dataset.test.iter().collect(),
    };
    anyhow::ensure!(!patches.is_empty(), "dataset {split} split is empty");
    let logits = match header.kind {
        CheckpointKind::Prototype => {
            let (mut model, _) = load_model(checkpoint_path)?;
            model.batch_logits(&patches, cfg.eval_batch)?
        }
        CheckpointKind::Baseline => {
            let (mut model, _) = load_baseline(checkpoint_path)?;
            model.batch_logits(&patches, cfg.eval_batch)?
        }
    };
    let truth: Vec<usize> = patches.iter().map(|p| p.class_id).collect();
    let predicted: Vec<usize> = logits.iter().map(|row| argmax(row)).collect();
    let metrics = evaluate_predictions(&truth, &predicted, dataset.classes.len())?;
    write_json(&out.join("metrics.json"), &metrics)?;
    let mut csv = String::from("image_id,true,pred,max_logit\n");
    for ((patch, &pred), row) in patches.iter().zip(&predicted).zip(&logits) {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            patch.id, dataset.classes[patch.class_id], dataset.classes[pred], row[pred]
        ));
    }
    let csv_path = out.join("predictions.csv");
    fs::write(&csv_path, csv).with_context(|| format!("writing {}", csv_path.display()))?;
    println!(
        "evaluated {} {split} images: accuracy {:.4} -> {}",
        patches.len(),
        metrics.accuracy,
        out.join("metrics.json").display()
    );
    Ok(())
}

fn save_heatmap_png(path: &Path, heatmap: &Heatmap) -> anyhow::Result<()> {
    let bytes: Vec<u8> =
        heatmap.values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::GrayImage::from_raw(heatmap.w as u32, heatmap.h as u32, bytes)
        .expect("pixel buffer length matches heatmap extents");
    buf.save_with_format(path, image::ImageFormat::Png)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_under(out: &Path, rel: &str) -> anyhow::Result<std::path::PathBuf> {
    let path = out.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(path)
}

pub fn explain_one(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    data: &Path,
    id: Option<&str>,
    out: &Path,
) -> anyhow::Result<()> {
    let (mut model, _) = load_model(checkpoint_path)?;
    let (dataset, _) = read_dataset(data)?;
    ensure_same_classes(&model.classes, &dataset.classes)?;
    let patch = match id {
        Some(id) => dataset
            .test
            .iter()
            .chain(dataset.train.iter())
            .find(|p| p.id == id)
            .with_context(|| format!("no patch named {id:?} in either split"))?,
        None => dataset.test.first().context("dataset has no test patches")?,
    };
    let explanation = explain(&mut model, patch, cfg.explain_top_k)?;
    let report_path = write_under(out, &format!("{}/report.json", explanation.report.input_id))?;
    let mut text = report_json(&explanation.report)?;
    text.push('\n');
    fs::write(&report_path, text).with_context(|| format!("writing {}", report_path.display()))?;
    for (rel, heatmap) in &explanation.heatmaps {
        save_heatmap_png(&write_under(out, rel)?, heatmap)?;
    }
    for (rel, image) in &explanation.patches {
        save_png(&write_under(out, rel)?, image)?;
    }
    println!(
        "explained {}: predicted {}, {} evidence entries -> {}",
        explanation.report.input_id,
        explanation.report.predicted_class,
        explanation.report.evidence.len(),
        report_path.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct EmbedSummary {
    points: usize,
    train_points: usize,
    test_points: usize,
    purity_k: usize,
    purity_mean: f64,
}

pub fn embed(cfg: &RunConfig, checkpoint_path: &Path, data: &Path, out: &Path) -> anyhow::Result<()> {
    let (mut model, _) = load_model(checkpoint_path)?;
    let (dataset, _) = read_dataset(data)?;
    ensure_same_classes(&model.classes, &dataset.classes)?;
    let points = activation_vectors(&mut model, &dataset, cfg.eval_batch)?;
    cfg.embedding.validate(points.len())?;
    let embedded = embed_points(&points, &cfg.embedding)?;
    let csv_path = out.join("embedding.csv");
    fs::write(&csv_path, embedding_csv(&embedded, &dataset.classes)?)
        .with_context(|| format!("writing {}", csv_path.display()))?;
    scatter_png(&out.join("embedding.png"), &embedded)?;
    let coords: Vec<[f32; 3]> = embedded.iter().map(|p| p.coords).collect();
    let labels: Vec<usize> = embedded.iter().map(|p| p.label).collect();
    let k = 10.min(coords.len() - 1).max(1);
    let purity = knn_purity(&coords, &labels, k)?;
    let summary = EmbedSummary {
        points: embedded.len(),
        train_points: embedded.iter().filter(|p| p.split == protoparts_core::embedding::Split::Train).count(),
        test_points: embedded.iter().filter(|p| p.split == protoparts_core::embedding::Split::Test).count(),
        purity_k: k,
        purity_mean: purity.mean,
    };
    write_json(&out.join("embedding-summary.json"), &summary)?;
    println!(
        "embedded {} activation vectors: knn purity {:.4} (k={k}) -> {}",
        embedded.len(),
        purity.mean,
        csv_path.display()
    );
    Ok(())
}

pub fn inspect(checkpoint_path: &Path) -> anyhow::Result<()> {
    let header = load_header(checkpoint_path)?;
    println!("{}", serde_json::to_string_pretty(&header)?);
    Ok(())
}
