//! Binary model checkpoints: a `PPKS` magic, a version word, a JSON header
//! describing configuration and array layout, and a raw little-endian f32
//! payload. Round trips are bit-identical.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::BackboneConfig;
use crate::data::NormalizationStats;
use crate::error::{Error, Result};
use crate::img::Image;
use crate::model::ProtoPartsModel;
use crate::prototype::PushProvenance;
use crate::training::BaselineModel;

pub const MAGIC: [u8; 4] = *b"PPKS";
pub const VERSION: u32 = 1;

/// Which model family a checkpoint stores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Prototype,
    Baseline,
}

/// One payload array: byte offset into the payload and logical shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub offset: u64,
    pub shape: Vec<usize>,
}

/// Push provenance minus pixel data, which lives in the payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceMeta {
    pub train_image_id: String,
    pub latent_cell: (usize, usize),
    pub input_rectangle: (usize, usize, usize, usize),
}

/// The JSON header between the fixed preamble and the float payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub backbone: BackboneConfig,
    pub classes: Vec<String>,
    pub prototypes_per_class: usize,
    pub feature_dim: usize,
    pub stats: NormalizationStats,
    /// One entry per prototype; `None` when never pushed. Empty for baselines.
    pub provenance: Vec<Option<ProvenanceMeta>>,
    /// Free-form training metadata recorded by the caller.
    pub metadata: Value,
    /// Payload directory in storage order.
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Default)]
struct PayloadWriter {
    arrays: Vec<ArrayEntry>,
    bytes: Vec<u8>,
}

impl PayloadWriter {
    fn push(&mut self, name: &str, shape: Vec<usize>, data: &[f32]) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len(), "{name}");
        self.arrays.push(ArrayEntry {
            name: name.to_string(),
            offset: self.bytes.len() as u64,
            shape,
        });
        for v in data {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn assemble(header: &CheckpointHeader, payload: &[u8]) -> Result<Vec<u8>> {
    let header_json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(16 + header_json.len() + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(payload);
    Ok(out)
}

/// Parse and validate the preamble and JSON header of checkpoint bytes.
pub fn read_header(bytes: &[u8]) -> Result<CheckpointHeader> {
    if bytes.len() < 16 {
        return Err(Error::Checkpoint("file shorter than the fixed preamble".into()));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("header length exceeds file size".into()))?;
    Ok(serde_json::from_slice(&bytes[16..end])?)
}

fn payload_of(bytes: &[u8]) -> &[u8] {
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    &bytes[16 + header_len..]
}

/// Check the array directory against the payload and index it by name.
fn index_arrays<'a>(
    header: &'a CheckpointHeader,
    payload: &'a [u8],
) -> Result<BTreeMap<&'a str, (&'a [usize], Vec<f32>)>> {
    let mut expected = 0u64;
    let mut map = BTreeMap::new();
    for entry in &header.arrays {
        if entry.offset != expected {
            return Err(Error::Checkpoint(format!(
                "array {} at offset {} but {} bytes precede it",
                entry.name, entry.offset, expected
            )));
        }
        let count = entry.shape.iter().product::<usize>();
        let bytes_len = count * 4;
        let start = entry.offset as usize;
        if start + bytes_len > payload.len() {
            return Err(Error::Checkpoint(format!(
                "array {} overruns the payload ({} bytes declared, {} available)",
                entry.name,
                bytes_len,
                payload.len() - start
            )));
        }
        let data: Vec<f32> = payload[start..start + bytes_len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if map.insert(entry.name.as_str(), (entry.shape.as_slice(), data)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate array {}", entry.name)));
        }
        expected += bytes_len as u64;
    }
    if expected != payload.len() as u64 {
        return Err(Error::Checkpoint(format!(
            "declared arrays cover {expected} bytes but the payload has {}",
            payload.len()
        )));
    }
    Ok(map)
}

fn image_array(img: &Image) -> (Vec<usize>, &[f32]) {
    (vec![3, img.h(), img.w()], img.data())
}

fn image_from(shape: &[usize], data: Vec<f32>, name: &str) -> Result<Image> {
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Checkpoint(format!("array {name} is not a [3, h, w] image")));
    }
    let mut img = Image::new(shape[1], shape[2]);
    img.data_mut().copy_from_slice(&data);
    Ok(img)
}

fn push_backbone(pw: &mut PayloadWriter, backbone: &crate::backbone::Backbone) {
    for p in backbone.params() {
        pw.push(&p.name, p.value.shape().to_vec(), p.value.data());
    }
    for (j, rs) in backbone.running().iter().enumerate() {
        pw.push(&format!("running{j}.mean"), vec![rs.mean.len()], &rs.mean);
        pw.push(&format!("running{j}.var"), vec![rs.var.len()], &rs.var);
    }
}

fn take<'a>(
    arrays: &mut BTreeMap<&'a str, (&'a [usize], Vec<f32>)>,
    name: &str,
) -> Result<(Vec<usize>, Vec<f32>)> {
    arrays
        .remove(name)
        .map(|(shape, data)| (shape.to_vec(), data))
        .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))
}

fn restore_backbone<'a>(
    backbone: &mut crate::backbone::Backbone,
    arrays: &mut BTreeMap<&'a str, (&'a [usize], Vec<f32>)>,
) -> Result<()> {
    for p in backbone.params_mut() {
        let (shape, data) = take(arrays, &p.name)?;
        if shape != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "array {} has shape {:?}, model expects {:?}",
                p.name,
                shape,
                p.value.shape()
            )));
        }
        p.value = crate::tensor::Tensor::new(shape, data)?;
        p.reset_state();
    }
    let count = backbone.running().len();
    let mut running = Vec::with_capacity(count);
    for j in 0..count {
        let (_, mean) = take(arrays, &format!("running{j}.mean"))?;
        let (_, var) = take(arrays, &format!("running{j}.var"))?;
        running.push(crate::tensor::RunningStats { mean, var });
    }
    backbone.set_running(running)
}

/// Serialize a prototype model to checkpoint bytes.
pub fn encode_model(model: &ProtoPartsModel, metadata: Value) -> Result<Vec<u8>> {
    let mut pw = PayloadWriter::default();
    push_backbone(&mut pw, &model.backbone);
    let protos = &model.prototypes;
    pw.push(
        "prototypes",
        vec![protos.count(), protos.dim()],
        model.prototypes.prototypes.value.data(),
    );
    pw.push(
        "head.weight",
        model.head.weight.value.shape().to_vec(),
        model.head.weight.value.data(),
    );
    let mut provenance = Vec::with_capacity(protos.count());
    for (p, prov) in protos.provenance().iter().enumerate() {
        provenance.push(prov.as_ref().map(|pr| ProvenanceMeta {
            train_image_id: pr.train_image_id.clone(),
            latent_cell: pr.latent_cell,
            input_rectangle: pr.input_rectangle,
        }));
        if let Some(pr) = prov {
            let (shape, data) = image_array(&pr.patch_pixels);
            pw.push(&format!("prov{p:03}.patch"), shape, data);
            let (shape, data) = image_array(&pr.source_image);
            pw.push(&format!("prov{p:03}.source"), shape, data);
        }
    }
    let header = CheckpointHeader {
        kind: CheckpointKind::Prototype,
        backbone: model.backbone.config().clone(),
        classes: model.classes.clone(),
        prototypes_per_class: protos.per_class(),
        feature_dim: protos.dim(),
        stats: model.stats.clone(),
        provenance,
        metadata,
        arrays: pw.arrays,
    };
    assemble(&header, &pw.bytes)
}

/// Rebuild a prototype model from checkpoint bytes.
pub fn decode_model(bytes: &[u8]) -> Result<(ProtoPartsModel, Value)> {
    let header = read_header(bytes)?;
    if header.kind != CheckpointKind::Prototype {
        return Err(Error::Checkpoint(
            "checkpoint stores a baseline model, not a prototype model".into(),
        ));
    }
    let mut arrays = index_arrays(&header, payload_of(bytes))?;
    let mut model = ProtoPartsModel::new(
        header.backbone.clone(),
        header.classes.clone(),
        header.stats.clone(),
        header.prototypes_per_class,
        0,
    )?;
    restore_backbone(&mut model.backbone, &mut arrays)?;
    let (shape, data) = take(&mut arrays, "prototypes")?;
    let count = model.prototypes.count();
    let dim = model.prototypes.dim();
    if shape != [count, dim] {
        return Err(Error::Checkpoint(format!(
            "prototypes array has shape {shape:?}, model expects [{count}, {dim}]"
        )));
    }
    model.prototypes.prototypes.value = crate::tensor::Tensor::new(shape, data)?;
    model.prototypes.prototypes.reset_state();
    if header.provenance.len() != count {
        return Err(Error::Checkpoint(format!(
            "{} provenance entries for {count} prototypes",
            header.provenance.len()
        )));
    }
    for (p, meta) in header.provenance.iter().enumerate() {
        if let Some(meta) = meta {
            let (shape, data) = take(&mut arrays, &format!("prov{p:03}.patch"))?;
            let patch_pixels = image_from(&shape, data, "patch")?;
            let (shape, data) = take(&mut arrays, &format!("prov{p:03}.source"))?;
            let source_image = image_from(&shape, data, "source")?;
            let row = model.prototypes.prototypes.value.data()
                [p * dim..(p + 1) * dim]
                .to_vec();
            model.prototypes.set_pushed(
                p,
                &row,
                PushProvenance {
                    train_image_id: meta.train_image_id.clone(),
                    latent_cell: meta.latent_cell,
                    input_rectangle: meta.input_rectangle,
                    patch_pixels,
                    source_image,
                },
            )?;
        }
    }
    let (shape, data) = take(&mut arrays, "head.weight")?;
    if shape != model.head.weight.value.shape() {
        return Err(Error::Checkpoint(format!("head.weight has shape {shape:?}")));
    }
    model.head.weight.value = crate::tensor::Tensor::new(shape, data)?;
    model.head.weight.reset_state();
    if let Some(name) = arrays.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected array {name}")));
    }
    Ok((model, header.metadata))
}

/// Serialize a baseline model to checkpoint bytes.
pub fn encode_baseline(model: &BaselineModel, metadata: Value) -> Result<Vec<u8>> {
    let mut pw = PayloadWriter::default();
    push_backbone(&mut pw, &model.backbone);
    pw.push("head.weight", model.head_w.value.shape().to_vec(), model.head_w.value.data());
    pw.push("head.bias", model.head_b.value.shape().to_vec(), model.head_b.value.data());
    let header = CheckpointHeader {
        kind: CheckpointKind::Baseline,
        backbone: model.backbone.config().clone(),
        classes: model.classes.clone(),
        prototypes_per_class: 0,
        feature_dim: model.backbone.config().feature_dim,
        stats: model.stats.clone(),
        provenance: Vec::new(),
        metadata,
        arrays: pw.arrays,
    };
    assemble(&header, &pw.bytes)
}

/// Rebuild a baseline model from checkpoint bytes.
pub fn decode_baseline(bytes: &[u8]) -> Result<(BaselineModel, Value)> {
    let header = read_header(bytes)?;
    if header.kind != CheckpointKind::Baseline {
        return Err(Error::Checkpoint(
            "checkpoint stores a prototype model, not a baseline".into(),
        ));
    }
    let mut arrays = index_arrays(&header, payload_of(bytes))?;
    let mut model = BaselineModel::new(
        header.backbone.clone(),
        header.classes.clone(),
        header.stats.clone(),
        0,
    )?;
    restore_backbone(&mut model.backbone, &mut arrays)?;
    for (param, name) in [(&mut model.head_w, "head.weight"), (&mut model.head_b, "head.bias")] {
        let (shape, data) = take(&mut arrays, name)?;
        if shape != param.value.shape() {
            return Err(Error::Checkpoint(format!("array {name} has shape {shape:?}")));
        }
        param.value = crate::tensor::Tensor::new(shape, data)?;
        param.reset_state();
    }
    if let Some(name) = arrays.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected array {name}")));
    }
    Ok((model, header.metadata))
}

/// Write a prototype-model checkpoint file.
pub fn write_model(path: &Path, model: &ProtoPartsModel, metadata: Value) -> Result<()> {
    Ok(std::fs::write(path, encode_model(model, metadata)?)?)
}

/// Read a prototype-model checkpoint file.
pub fn read_model(path: &Path) -> Result<(ProtoPartsModel, Value)> {
    decode_model(&std::fs::read(path)?)
}

/// Write a baseline-model checkpoint file.
pub fn write_baseline(path: &Path, model: &BaselineModel, metadata: Value) -> Result<()> {
    Ok(std::fs::write(path, encode_baseline(model, metadata)?)?)
}

/// Read a baseline-model checkpoint file.
pub fn read_baseline(path: &Path) -> Result<(BaselineModel, Value)> {
    decode_baseline(&std::fs::read(path)?)
}

/// Read only the header of a checkpoint file.
pub fn inspect_file(path: &Path) -> Result<CheckpointHeader> {
    read_header(&std::fs::read(path)?)
}
