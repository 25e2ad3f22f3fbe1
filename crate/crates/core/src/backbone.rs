//! Convolutional trunk and add-on head.
//!
//! The trunk is a small VGG-style stack: per block, two 3×3 same-padding
//! convolutions (optionally batch-normalized) with relu, then 2×2 max
//! pooling. The add-on head maps trunk channels into the prototype space
//! with two 1×1 convolutions ending in a sigmoid, so every feature
//! coordinate lands in (0, 1).

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{BnMode, Param, RunningStats, Tape, Tensor, VarId};

const BN_MOMENTUM: f32 = 0.1;
const BN_EPS: f32 = 1e-5;

/// Architecture of the backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Input side length; images are square.
    pub input_size: usize,
    /// Output channels per block; the length sets the number of blocks.
    pub channels: Vec<usize>,
    /// Dimension of the prototype feature space.
    pub feature_dim: usize,
    pub use_batchnorm: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_size: 64,
            channels: vec![32, 64, 128],
            feature_dim: 64,
            use_batchnorm: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::InvalidConfig("backbone needs at least one block".into()));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::InvalidConfig("block channel counts must be positive".into()));
        }
        if self.feature_dim < 8 {
            return Err(Error::InvalidConfig(format!(
                "feature_dim must be at least 8, got {}",
                self.feature_dim
            )));
        }
        let down = 1usize << self.blocks();
        if self.input_size == 0 || self.input_size % down != 0 {
            return Err(Error::InvalidConfig(format!(
                "input_size {} must be a positive multiple of {down} (one halving per block)",
                self.input_size
            )));
        }
        Ok(())
    }

    pub fn blocks(&self) -> usize {
        self.channels.len()
    }

    /// Side length of the feature grid: input halved once per block.
    pub fn grid(&self) -> usize {
        self.input_size >> self.blocks()
    }

    /// Layer geometry as (start, jump, rf) in half-pixel units, walked
    /// through every conv and pool. Integer arithmetic keeps the receptive
    /// field bounds exact.
    fn geometry_half_px(&self) -> (i64, i64, i64) {
        let (mut start, mut jump, mut rf) = (0i64, 2i64, 2i64);
        for _ in 0..self.blocks() {
            rf += 2 * jump; // conv 3×3, pad 1, stride 1
            rf += 2 * jump;
            start += jump / 2; // pool 2×2, stride 2
            rf += jump;
            jump *= 2;
        }
        (start, jump, rf)
    }

    fn span(&self, cell: usize) -> (isize, isize) {
        let (start, jump, rf) = self.geometry_half_px();
        let center = start + cell as i64 * jump;
        let half = (rf - 2) / 2;
        debug_assert_eq!((center - half) % 2, 0);
        (((center - half) / 2) as isize, ((center + half) / 2 + 1) as isize)
    }

    /// Exact input region a feature cell sees, half-open, possibly extending
    /// past the image when the cell's context includes padding.
    pub fn receptive_field(&self, cell_y: usize, cell_x: usize) -> ReceptiveField {
        let (y0, y1) = self.span(cell_y);
        let (x0, x1) = self.span(cell_x);
        ReceptiveField { y0, y1, x0, x1 }
    }
}

/// Half-open input rectangle [y0, y1) × [x0, x1) seen by one feature cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReceptiveField {
    pub y0: isize,
    pub y1: isize,
    pub x0: isize,
    pub x1: isize,
}

impl ReceptiveField {
    /// Intersect with the image bounds.
    pub fn clamped(&self, size: usize) -> (usize, usize, usize, usize) {
        let s = size as isize;
        (
            self.y0.clamp(0, s) as usize,
            self.y1.clamp(0, s) as usize,
            self.x0.clamp(0, s) as usize,
            self.x1.clamp(0, s) as usize,
        )
    }
}

/// Which parameters receive gradients in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    Frozen,
    AddonOnly,
    All,
}

/// Trunk + add-on parameters with their batch-norm running statistics.
pub struct Backbone {
    config: BackboneConfig,
    params: Vec<Param>,
    running: Vec<RunningStats>,
    addon_start: usize,
}

fn he_conv(name: String, f: usize, c: usize, k: usize, seed: u64, layer: u64) -> Param {
    let fan_in = c * k * k;
    let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).unwrap();
    let mut rng = rng::stream(seed, &[rng::TAG_INIT, layer]);
    let data: Vec<f32> = (0..f * c * k * k).map(|_| normal.sample(&mut rng)).collect();
    Param::new(name, Tensor::new(vec![f, c, k, k], data).unwrap())
}

impl Backbone {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        let mut running = Vec::new();
        let mut layer = 0u64;
        let mut c_in = 3usize;
        for (b, &c_out) in config.channels.iter().enumerate() {
            for half in 0..2 {
                let cin = if half == 0 { c_in } else { c_out };
                params.push(he_conv(format!("block{b}.conv{half}.weight"), c_out, cin, 3, seed, layer));
                layer += 1;
                if config.use_batchnorm {
                    params.push(Param::new(
                        format!("block{b}.bn{half}.gamma"),
                        Tensor::full(vec![c_out], 1.0),
                    ));
                    params.push(Param::new(
                        format!("block{b}.bn{half}.beta"),
                        Tensor::zeros(vec![c_out]),
                    ));
                    running.push(RunningStats::new(c_out));
                }
            }
            c_in = c_out;
        }
        let addon_start = params.len();
        let d = config.feature_dim;
        params.push(he_conv("addon.conv0.weight".into(), d, c_in, 1, seed, layer));
        params.push(he_conv("addon.conv1.weight".into(), d, d, 1, seed, layer + 1));
        Ok(Backbone { config, params, running, addon_start })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Index of the first add-on parameter; everything before is trunk.
    pub fn addon_start(&self) -> usize {
        self.addon_start
    }

    pub fn running(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn set_running(&mut self, running: Vec<RunningStats>) -> Result<()> {
        if running.len() != self.running.len()
            || running
                .iter()
                .zip(&self.running)
                .any(|(a, b)| a.mean.len() != b.mean.len() || a.var.len() != b.var.len())
        {
            return Err(Error::InvalidInput("running statistics do not match the architecture".into()));
        }
        self.running = running;
        Ok(())
    }

    fn grad_enabled(&self, index: usize, scope: TrainScope) -> bool {
        match scope {
            TrainScope::Frozen => false,
            TrainScope::AddonOnly => index >= self.addon_start,
            TrainScope::All => true,
        }
    }

    /// Run the backbone on a whitened batch [n, 3, S, S], returning the
    /// feature variable [n, D, g, g] and one leaf per parameter (aligned
    /// with `params()`). In `BnMode::Train` the running statistics update.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        x: VarId,
        mode: BnMode,
        scope: TrainScope,
    ) -> Result<(VarId, Vec<VarId>)> {
        let shape = tape.value(x).shape();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != self.config.input_size || shape[3] != self.config.input_size {
            return Err(Error::shape(
                "backbone",
                format!(
                    "expected [n, 3, {s}, {s}] input, got {shape:?}",
                    s = self.config.input_size
                ),
            ));
        }
        let leaves: Vec<VarId> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.leaf(p.value.clone().requires_grad(self.grad_enabled(i, scope))))
            .collect();
        let mut h = x;
        let mut li = 0usize;
        let mut bn = 0usize;
        for _ in 0..self.config.blocks() {
            for _ in 0..2 {
                h = tape.conv2d(h, leaves[li], 1, 1)?;
                li += 1;
                if self.config.use_batchnorm {
                    let (gamma, beta) = (leaves[li], leaves[li + 1]);
                    li += 2;
                    h = tape.batch_norm(h, gamma, beta, mode, &mut self.running[bn], BN_MOMENTUM, BN_EPS)?;
                    bn += 1;
                }
                h = tape.relu(h);
            }
            h = tape.maxpool2d(h)?;
        }
        h = tape.conv2d(h, leaves[li], 1, 0)?;
        h = tape.relu(h);
        h = tape.conv2d(h, leaves[li + 1], 1, 0)?;
        h = tape.sigmoid(h);
        Ok((h, leaves))
    }
}
