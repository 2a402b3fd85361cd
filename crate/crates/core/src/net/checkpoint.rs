//! Parameter checkpoints: a binary blob of named little-endian f32 arrays
//! plus a JSON index (name → shape, offset) that embeds the `FusionConfig`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::sha256_hex;
use crate::error::{Error, Result};
use crate::net::{FusionConfig, FusionParams};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: FusionConfig,
    pub params: FusionParams<f32>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointIndex {
    version: u32,
    config: FusionConfig,
    arrays: Vec<ArrayEntry>,
    checksum: String,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

/// Logical shapes in the same order as `FusionParams::arrays`.
fn array_shapes<F: Scalar>(params: &FusionParams<F>) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for (i, stage) in params.stages.iter().enumerate() {
        out.push((
            format!("stage{i}.weight"),
            vec![stage.out_channels, stage.in_channels, 3, 3],
        ));
        out.push((format!("stage{i}.bias"), vec![stage.out_channels]));
    }
    if let Some(mp) = &params.mask_projection {
        out.push(("mask_proj.scale".into(), vec![mp.scale.len()]));
        out.push(("mask_proj.shift".into(), vec![mp.shift.len()]));
    }
    out.push((
        "cnn_head.weight".into(),
        vec![params.cnn_head.out_dim, params.cnn_head.in_dim],
    ));
    out.push(("cnn_head.bias".into(), vec![params.cnn_head.out_dim]));
    if let Some(latent) = &params.latent {
        let d = latent.token_dim;
        out.push((
            "latent.token_cnn.weight".into(),
            vec![d, latent.token_cnn.in_dim],
        ));
        out.push(("latent.token_cnn.bias".into(), vec![d]));
        out.push((
            "latent.token_sam.weight".into(),
            vec![d, latent.token_sam.in_dim],
        ));
        out.push(("latent.token_sam.bias".into(), vec![d]));
        out.push(("latent.query".into(), vec![d, d]));
        out.push(("latent.key".into(), vec![d, d]));
        out.push(("latent.value".into(), vec![d, d]));
        out.push((
            "latent.classifier.weight".into(),
            vec![latent.classifier.out_dim, latent.classifier.in_dim],
        ));
        out.push((
            "latent.classifier.bias".into(),
            vec![latent.classifier.out_dim],
        ));
    }
    out
}

pub fn save_checkpoint<F: Scalar>(
    bin_path: &Path,
    index_path: &Path,
    config: &FusionConfig,
    params: &FusionParams<F>,
) -> Result<()> {
    let narrow = params.to_f32();
    let shapes = array_shapes(&narrow);
    let arrays = narrow.arrays();
    debug_assert_eq!(shapes.len(), arrays.len());

    let mut blob: Vec<u8> = Vec::new();
    let mut entries = Vec::with_capacity(arrays.len());
    for ((name, data), (shape_name, shape)) in arrays.iter().zip(&shapes) {
        debug_assert_eq!(name, shape_name);
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let offset = blob.len() as u64;
        for v in data.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(ArrayEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
        });
    }
    let index = CheckpointIndex {
        version: 1,
        config: config.clone(),
        arrays: entries,
        checksum: sha256_hex(&blob),
    };
    fs::write(bin_path, blob)?;
    fs::write(index_path, serde_json::to_vec_pretty(&index)?)?;
    Ok(())
}

pub fn load_checkpoint(bin_path: &Path, index_path: &Path) -> Result<Checkpoint> {
    let index: CheckpointIndex = serde_json::from_slice(&fs::read(index_path)?)?;
    if index.version != 1 {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            index.version
        )));
    }
    index.config.validate()?;
    let blob = fs::read(bin_path)?;
    if sha256_hex(&blob) != index.checksum {
        return Err(Error::Format("checkpoint checksum mismatch".into()));
    }

    let mut params = FusionParams::<f32>::zeros(&index.config);
    let expected = array_shapes(&params);
    if expected.len() != index.arrays.len() {
        return Err(Error::Format(format!(
            "checkpoint lists {} arrays, config implies {}",
            index.arrays.len(),
            expected.len()
        )));
    }
    for (slot, entry) in params.arrays_mut().into_iter().zip(&index.arrays) {
        let (name, data) = slot;
        if name != entry.name {
            return Err(Error::Format(format!(
                "checkpoint array order mismatch: {} vs {}",
                entry.name, name
            )));
        }
        let len: usize = entry.shape.iter().product();
        if len != data.len() {
            return Err(Error::Format(format!(
                "array {name} shape {:?} does not match config",
                entry.shape
            )));
        }
        let start = entry.offset as usize;
        let end = start + 4 * len;
        if end > blob.len() {
            return Err(Error::Format(format!("array {name} out of bounds")));
        }
        for (i, v) in data.iter_mut().enumerate() {
            let bytes: [u8; 4] = blob[start + 4 * i..start + 4 * i + 4].try_into().unwrap();
            *v = f32::from_le_bytes(bytes);
        }
    }
    Ok(Checkpoint {
        config: index.config,
        params,
    })
}
