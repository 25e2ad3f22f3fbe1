//! The run configuration: one JSON document holding every parameter a
//! pipeline stage consumes, echoed back as `resolved-config.json` so each
//! run records the exact settings it executed under.

use std::fs;
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use protoparts_core::backbone::BackboneConfig;
use protoparts_core::data::DatasetManifest;
use protoparts_core::embedding::EmbeddingConfig;
use protoparts_core::explain::DEFAULT_EVIDENCE;
use protoparts_core::prototype::PROTOTYPES_PER_CLASS;
use protoparts_core::training::TrainConfig;

/// Every tunable the pipeline reads, grouped by stage. A config file may
/// omit any top-level section to get its defaults; a section that is present
/// must be complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetManifest,
    pub backbone: BackboneConfig,
    pub prototypes_per_class: usize,
    pub train: TrainConfig,
    pub embedding: EmbeddingConfig,
    /// Evidence entries per explanation report.
    pub explain_top_k: usize,
    /// Chunk size for evaluation-only forward passes.
    pub eval_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetManifest::default(),
            backbone: BackboneConfig::default(),
            prototypes_per_class: PROTOTYPES_PER_CLASS,
            train: TrainConfig::default(),
            embedding: EmbeddingConfig::default(),
            explain_top_k: DEFAULT_EVIDENCE,
            eval_batch: 64,
        }
    }
}

impl RunConfig {
    /// Parse a config file, or fall back to defaults when none is given.
    pub fn load(path: Option<&Path>) -> anyhow::Result<RunConfig> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    /// Route one seed into every stage that draws randomness.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.dataset.seed = s;
            self.train.seed = s;
            self.embedding.seed = s;
        }
        self
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.dataset.validate()?;
        self.backbone.validate()?;
        self.train.validate()?;
        if self.backbone.input_size != self.dataset.patch_size {
            anyhow::bail!(
                "backbone input size {} does not match dataset patch size {}",
                self.backbone.input_size,
                self.dataset.patch_size
            );
        }
        if self.prototypes_per_class == 0 {
            anyhow::bail!("prototypes_per_class must be positive");
        }
        if self.explain_top_k == 0 {
            anyhow::bail!("explain_top_k must be positive");
        }
        if self.eval_batch == 0 {
            anyhow::bail!("eval_batch must be positive");
        }
        Ok(())
    }

    /// Write the effective configuration into `out_dir/resolved-config.json`.
    pub fn write_resolved(&self, out_dir: &Path) -> anyhow::Result<()> {
        fs::create_dir_all(out_dir)
            .with_context(|| format!("creating output directory {}", out_dir.display()))?;
        let path = out_dir.join("resolved-config.json");
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
