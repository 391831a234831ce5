//! Single-file containers for models and datasets.
//!
//! Layout: an 8-byte magic, a little-endian u32 container version, a
//! little-endian u64 manifest length, the JSON manifest, then a raw
//! blob of little-endian values the manifest points into. Manifests are
//! serialized from structs (stable field order), blob entries are
//! written in canonical order, and all offsets are explicit, so saving
//! the same data twice produces identical bytes.
//!
//! Model bundles come in two storages: `dense` writes every tensor in
//! full; `sparse` writes pruned kernels as their mask words plus the
//! surviving block values only.

use crate::error::{FeatherError, Result};
use crate::model::{ModelConfig, ModelMasks, ModelParams, PARAM_NAMES};
use crate::scalar::{Precision, Scalar};
use crate::sparsity::BlockMask;
use crate::tensor::Tensor;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"FTHRBNDL";
pub const CONTAINER_VERSION: u32 = 1;

/// Serialize a manifest + blob into container bytes.
pub fn write_container<M: Serialize>(manifest: &M, blob: &[u8]) -> Result<Vec<u8>> {
    let manifest_json = serde_json::to_vec(manifest)
        .map_err(|e| FeatherError::Format(format!("manifest encode failed: {e}")))?;
    let mut out = Vec::with_capacity(8 + 4 + 8 + manifest_json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    out.extend_from_slice(blob);
    Ok(out)
}

/// Split container bytes into a parsed manifest and the blob.
pub fn read_container<M: DeserializeOwned>(bytes: &[u8]) -> Result<(M, &[u8])> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(FeatherError::Format("not a feather container".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CONTAINER_VERSION {
        return Err(FeatherError::Format(format!(
            "unsupported container version {version}"
        )));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let rest = &bytes[20..];
    if rest.len() < mlen {
        return Err(FeatherError::Format("container truncated in manifest".into()));
    }
    let manifest: M = serde_json::from_slice(&rest[..mlen])
        .map_err(|e| FeatherError::Format(format!("bad manifest: {e}")))?;
    Ok((manifest, &rest[mlen..]))
}

/// How kernel tensors with masks are written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Storage {
    Dense,
    Sparse,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: u64,
    /// Stored scalar count (full tensor, or surviving block values).
    elems: u64,
    #[serde(default)]
    sparse: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskEntry {
    name: String,
    rows: usize,
    cols: usize,
    block_rows: usize,
    block_cols: usize,
    /// Byte offset of the mask words in the blob.
    offset: u64,
    words: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelManifest {
    format: String,
    precision: Precision,
    storage: Storage,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    masks: Vec<MaskEntry>,
}

const MODEL_FORMAT: &str = "feather-model";

fn mask_for<'a>(masks: &'a ModelMasks, name: &str) -> Option<&'a BlockMask> {
    match name {
        "attn_lstm_w" => masks.attn_lstm.as_ref(),
        "dec_lstm_w" => masks.dec_lstm.as_ref(),
        _ => None,
    }
}

/// Kept-block values in block-row-major order.
fn kept_block_values<F: Scalar>(t: &Tensor<F>, mask: &BlockMask, out: &mut Vec<u8>) -> u64 {
    let (gr, gc) = mask.grid();
    let (brh, bcw) = mask.block_shape();
    let mut elems = 0u64;
    for b in 0..gr * gc {
        if !mask.is_kept(b) {
            continue;
        }
        let (br, bc) = (b / gc, b % gc);
        for r in 0..brh {
            for c in 0..bcw {
                t.at2(br * brh + r, bc * bcw + c).write_le(out);
                elems += 1;
            }
        }
    }
    elems
}

fn fill_kept_blocks<F: Scalar>(
    data: &mut [F],
    mask: &BlockMask,
    values: &[F],
) -> Result<()> {
    let (gr, gc) = mask.grid();
    let (brh, bcw) = mask.block_shape();
    let cols = mask.cols();
    let mut next = 0usize;
    for b in 0..gr * gc {
        if !mask.is_kept(b) {
            continue;
        }
        let (br, bc) = (b / gc, b % gc);
        for r in 0..brh {
            for c in 0..bcw {
                if next >= values.len() {
                    return Err(FeatherError::Format("sparse tensor too short".into()));
                }
                data[(br * brh + r) * cols + bc * bcw + c] = values[next];
                next += 1;
            }
        }
    }
    if next != values.len() {
        return Err(FeatherError::Format("sparse tensor has trailing values".into()));
    }
    Ok(())
}

/// Encode a model (weights, masks, config) as container bytes.
pub fn model_to_bytes<F: Scalar>(
    params: &ModelParams<F>,
    masks: &ModelMasks,
    config: &ModelConfig,
    storage: Storage,
) -> Result<Vec<u8>> {
    config.validate()?;
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(PARAM_NAMES.len());
    for (name, t) in params.tensors() {
        let offset = blob.len() as u64;
        let (elems, sparse) = match (storage, mask_for(masks, name)) {
            (Storage::Sparse, Some(mask)) => (kept_block_values(t, mask, &mut blob), true),
            _ => {
                for v in t.iter() {
                    v.write_le(&mut blob);
                }
                (t.numel() as u64, false)
            }
        };
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            elems,
            sparse,
        });
    }

    let mut mask_entries = Vec::new();
    for name in ["attn_lstm_w", "dec_lstm_w"] {
        if let Some(mask) = mask_for(masks, name) {
            let offset = blob.len() as u64;
            for w in mask.words() {
                blob.extend_from_slice(&w.to_le_bytes());
            }
            let (brh, bcw) = mask.block_shape();
            mask_entries.push(MaskEntry {
                name: name.to_string(),
                rows: mask.rows(),
                cols: mask.cols(),
                block_rows: brh,
                block_cols: bcw,
                offset,
                words: mask.words().len() as u64,
            });
        }
    }

    let manifest = ModelManifest {
        format: MODEL_FORMAT.to_string(),
        precision: F::PRECISION,
        storage,
        config: config.clone(),
        tensors,
        masks: mask_entries,
    };
    write_container(&manifest, &blob)
}

/// A model read back from a bundle.
#[derive(Debug, Clone)]
pub struct LoadedModel<F: Scalar> {
    pub params: ModelParams<F>,
    pub masks: ModelMasks,
    pub config: ModelConfig,
    /// Precision the file was written at (values are cast to `F` when
    /// it differs).
    pub stored_precision: Precision,
}

fn blob_slice<'a>(blob: &'a [u8], offset: u64, bytes: usize, what: &str) -> Result<&'a [u8]> {
    let start = offset as usize;
    let end = start
        .checked_add(bytes)
        .ok_or_else(|| FeatherError::Format(format!("{what}: offset overflow")))?;
    if end > blob.len() {
        return Err(FeatherError::Format(format!(
            "{what}: blob range {start}..{end} outside {} bytes",
            blob.len()
        )));
    }
    Ok(&blob[start..end])
}

fn read_values<F: Scalar>(raw: &[u8], stored: Precision) -> Vec<F> {
    match stored {
        Precision::F32 => raw
            .chunks_exact(4)
            .map(|c| {
                let v = f32::read_le(c);
                if F::PRECISION == Precision::F32 {
                    F::read_le(c)
                } else {
                    F::from_f64c(v as f64)
                }
            })
            .collect(),
        Precision::F64 => raw
            .chunks_exact(8)
            .map(|c| {
                if F::PRECISION == Precision::F64 {
                    F::read_le(c)
                } else {
                    F::from_f64c(f64::read_le(c))
                }
            })
            .collect(),
    }
}

/// Decode a model bundle, casting values to `F` when the stored
/// precision differs.
pub fn model_from_bytes<F: Scalar>(bytes: &[u8]) -> Result<LoadedModel<F>> {
    let (manifest, blob) = read_container::<ModelManifest>(bytes)?;
    if manifest.format != MODEL_FORMAT {
        return Err(FeatherError::Format(format!(
            "expected a {MODEL_FORMAT} bundle, found `{}`",
            manifest.format
        )));
    }
    manifest.config.validate()?;
    let width = match manifest.precision {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };

    // masks first: sparse tensors need them to rebuild
    let mut masks = ModelMasks::default();
    for entry in &manifest.masks {
        let raw = blob_slice(blob, entry.offset, entry.words as usize * 8, &entry.name)?;
        let words: Vec<u64> = raw
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mask = BlockMask::from_raw(
            entry.rows,
            entry.cols,
            entry.block_rows,
            entry.block_cols,
            words,
        )?;
        match entry.name.as_str() {
            "attn_lstm_w" => masks.attn_lstm = Some(mask),
            "dec_lstm_w" => masks.dec_lstm = Some(mask),
            other => {
                return Err(FeatherError::Format(format!(
                    "mask for unknown tensor `{other}`"
                )))
            }
        }
    }

    let expected = manifest.config.param_shapes();
    if manifest.tensors.len() != expected.len() {
        return Err(FeatherError::Format(format!(
            "bundle has {} tensors, expected {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    let mut loaded: Vec<Tensor<F>> = Vec::with_capacity(expected.len());
    for (entry, (name, shape)) in manifest.tensors.iter().zip(expected.iter()) {
        if entry.name != *name {
            return Err(FeatherError::Format(format!(
                "tensor `{}` out of order, expected `{name}`",
                entry.name
            )));
        }
        if entry.shape != *shape {
            return Err(FeatherError::Format(format!(
                "tensor `{name}` has shape {:?}, config implies {shape:?}",
                entry.shape
            )));
        }
        let raw = blob_slice(blob, entry.offset, entry.elems as usize * width, name)?;
        let values = read_values::<F>(raw, manifest.precision);
        let numel: usize = shape.iter().product();
        let tensor = if entry.sparse {
            let mask = mask_for(&masks, name).ok_or_else(|| {
                FeatherError::Format(format!("sparse tensor `{name}` has no mask"))
            })?;
            let mut data = vec![F::zero(); numel];
            fill_kept_blocks(&mut data, mask, &values)?;
            Tensor::new(shape.clone(), data)?
        } else {
            if values.len() != numel {
                return Err(FeatherError::Format(format!(
                    "tensor `{name}` stores {} values for {numel} elements",
                    values.len()
                )));
            }
            Tensor::new(shape.clone(), values)?
        };
        loaded.push(tensor);
    }

    let mut it = loaded.into_iter();
    let params = ModelParams {
        embedding: it.next().unwrap(),
        enc_fwd_w: it.next().unwrap(),
        enc_fwd_b: it.next().unwrap(),
        enc_bwd_w: it.next().unwrap(),
        enc_bwd_b: it.next().unwrap(),
        attn_lstm_w: it.next().unwrap(),
        attn_lstm_b: it.next().unwrap(),
        attn_proj_w: it.next().unwrap(),
        attn_proj_b: it.next().unwrap(),
        dec_lstm_w: it.next().unwrap(),
        dec_lstm_b: it.next().unwrap(),
        out_w: it.next().unwrap(),
        out_b: it.next().unwrap(),
        post_lstm_w: it.next().unwrap(),
        post_lstm_b: it.next().unwrap(),
        post_out_w: it.next().unwrap(),
        post_out_b: it.next().unwrap(),
    };

    Ok(LoadedModel {
        params,
        masks,
        config: manifest.config,
        stored_precision: manifest.precision,
    })
}

/// Read just the stored precision of a model bundle.
pub fn peek_precision(bytes: &[u8]) -> Result<Precision> {
    let (manifest, _) = read_container::<ModelManifest>(bytes)?;
    if manifest.format != MODEL_FORMAT {
        return Err(FeatherError::Format(format!(
            "expected a {MODEL_FORMAT} bundle, found `{}`",
            manifest.format
        )));
    }
    Ok(manifest.precision)
}

/// Write a model bundle to disk.
pub fn save_model<F: Scalar>(
    path: &Path,
    params: &ModelParams<F>,
    masks: &ModelMasks,
    config: &ModelConfig,
    storage: Storage,
) -> Result<()> {
    let bytes = model_to_bytes(params, masks, config, storage)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Read a model bundle from disk.
pub fn load_model<F: Scalar>(path: &Path) -> Result<LoadedModel<F>> {
    let bytes = std::fs::read(path)?;
    model_from_bytes(&bytes)
}
