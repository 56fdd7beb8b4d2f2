//! Checkpoint container: one newline-terminated JSON header followed by
//! each tensor's raw little-endian 32-bit float payload, concatenated in
//! sorted path order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::budget::ModelShape;
use crate::model::{param_layout, Activation};
use crate::numerics::ParameterSet;

use super::TrainError;

pub const CHECKPOINT_FORMAT: &str = "isodepth-ckpt-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub shape: ModelShape,
    pub activation: Activation,
    pub step: u64,
    pub seed: u64,
    pub val_perplexity: f64,
    pub vocab_fingerprint: String,
    pub tensors: Vec<TensorMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorMeta {
    pub path: String,
    pub shape: Vec<usize>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParameterSet,
}

/// Round-trips parameters through the 32-bit storage precision without
/// touching disk; used to evaluate exactly what a checkpoint will contain.
pub fn quantize_params(params: &ParameterSet) -> ParameterSet {
    let mut out = ParameterSet::new(params.rng_seed);
    for (path, p) in params.iter() {
        let data: Vec<f64> = p.data.iter().map(|&v| v as f32 as f64).collect();
        out.insert(path, p.shape.clone(), data);
    }
    out
}

pub fn save_checkpoint(
    path: &Path,
    shape: &ModelShape,
    activation: Activation,
    params: &ParameterSet,
    step: u64,
    seed: u64,
    val_perplexity: f64,
    vocab_fingerprint: &str,
) -> Result<(), TrainError> {
    let layout = param_layout(shape);
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        shape: *shape,
        activation,
        step,
        seed,
        val_perplexity,
        vocab_fingerprint: vocab_fingerprint.to_string(),
        tensors: layout
            .iter()
            .map(|(p, s)| TensorMeta {
                path: p.clone(),
                shape: s.clone(),
            })
            .collect(),
    };
    let mut file = std::fs::File::create(path).map_err(|e| TrainError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut header_bytes = serde_json::to_vec(&header).expect("header serializes");
    header_bytes.push(b'\n');
    file.write_all(&header_bytes).map_err(|e| TrainError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    // ParameterSet iterates in sorted path order; the layout is emitted in
    // that same order in the header.
    let mut sorted = layout;
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut buf: Vec<u8> = Vec::new();
    for (tensor_path, _) in &sorted {
        let p = params.get(tensor_path).ok_or_else(|| {
            TrainError::Checkpoint(format!("missing tensor {tensor_path} while saving"))
        })?;
        buf.reserve(p.data.len() * 4);
        for &v in p.data.iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    file.write_all(&buf).map_err(|e| TrainError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let mut file = std::fs::File::open(path).map_err(|e| TrainError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut raw = Vec::new();
    file.read_to_end(&mut raw).map_err(|e| TrainError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let newline = raw
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| TrainError::Checkpoint("no header line found".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&raw[..newline])
        .map_err(|e| TrainError::Checkpoint(format!("bad header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(TrainError::Checkpoint(format!(
            "unsupported format {:?}",
            header.format
        )));
    }

    let mut sorted = header.tensors.clone();
    sorted.sort_by(|a, b| a.path.cmp(&b.path));
    let mut params = ParameterSet::new(header.seed);
    let mut offset = newline + 1;
    for meta in &sorted {
        let numel: usize = meta.shape.iter().product();
        let bytes = numel * 4;
        if offset + bytes > raw.len() {
            return Err(TrainError::Checkpoint(format!(
                "payload truncated at tensor {}",
                meta.path
            )));
        }
        let data: Vec<f64> = raw[offset..offset + bytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        params.insert(&meta.path, meta.shape.clone(), data);
        offset += bytes;
    }
    if offset != raw.len() {
        return Err(TrainError::Checkpoint(format!(
            "{} trailing bytes after last tensor",
            raw.len() - offset
        )));
    }
    Ok(Checkpoint { header, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TransformerModel;

    fn tiny_shape() -> ModelShape {
        ModelShape {
            n_layers: 2,
            d_model: 8,
            d_attn: 8,
            d_ff: 16,
            n_heads: 2,
            n_vocab: 11,
            n_ctx: 8,
        }
    }

    #[test]
    fn save_load_roundtrip_is_exact_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = TransformerModel::init(tiny_shape(), 42).unwrap();
        let quant = quantize_params(&model.params);
        save_checkpoint(
            &path,
            &tiny_shape(),
            Activation::Gelu,
            &model.params,
            7,
            42,
            123.5,
            "fp",
        )
        .unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.header.step, 7);
        assert_eq!(loaded.header.shape, tiny_shape());
        assert_eq!(loaded.header.val_perplexity, 123.5);
        for (path, p) in quant.iter() {
            let l = loaded.params.get(path).unwrap();
            assert_eq!(l.shape, p.shape);
            assert_eq!(l.data.as_slice(), p.data.as_slice(), "{path}");
        }
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = TransformerModel::init(tiny_shape(), 1).unwrap();
        save_checkpoint(
            &path,
            &tiny_shape(),
            Activation::Gelu,
            &model.params,
            0,
            1,
            1.0,
            "fp",
        )
        .unwrap();
        let raw = std::fs::read(&path).unwrap();
        std::fs::write(&path, &raw[..raw.len() - 8]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(TrainError::Checkpoint(_))
        ));
    }
}
