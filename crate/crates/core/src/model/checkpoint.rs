//! Checkpoint serialization.
//!
//! Layout: 8-byte magic `PLAB0001`, little-endian u32 header length, UTF-8
//! JSON header (model config plus a named tensor table with shapes and byte
//! offsets), then each tensor's data as raw little-endian f32, concatenated
//! in header order. Per-layer widths are not stored: they are reconstructed
//! from the tensor shapes on load.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{LayerDims, ModelConfig, ModelError, TransformerModel};
use crate::tensor::{ParamId, Tensor};

pub const MAGIC: &[u8; 8] = b"PLAB0001";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {MAGIC:?}, found {0:?}")]
    BadMagic(Vec<u8>),
    #[error("file truncated: {0}")]
    Truncated(&'static str),
    #[error("malformed header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("tensor {name}: stated offset {stated} but data lives at {actual}")]
    BadOffset {
        name: String,
        stated: u64,
        actual: u64,
    },
    #[error("data section holds {got} bytes, header implies {want}")]
    DataLength { got: usize, want: usize },
    #[error("layer {layer}: {what} width {got} is not divisible by head_dim {head_dim}")]
    RaggedHeads {
        layer: usize,
        what: &'static str,
        got: usize,
        head_dim: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

/// Serialize the model to `path`. The bytes are first written to
/// `<path>.partial` and renamed into place, so a crash or error never leaves
/// a plausible-looking half-written checkpoint at the target path.
pub fn save(model: &TransformerModel<f32>, path: &Path) -> Result<(), CheckpointError> {
    let mut entries = Vec::with_capacity(model.params().len());
    let mut data: Vec<u8> = Vec::new();
    for (id, t) in model.params() {
        entries.push(TensorEntry {
            name: id.as_str().to_string(),
            shape: t.shape().to_vec(),
            offset: data.len() as u64,
        });
        for &x in t.data() {
            data.extend_from_slice(&x.to_le_bytes());
        }
    }
    let header = Header {
        config: model.config().clone(),
        tensors: entries,
    };
    let header_json = serde_json::to_vec(&header)?;

    let partial = partial_path(path);
    {
        let mut f = fs::File::create(&partial)?;
        f.write_all(MAGIC)?;
        f.write_all(&(header_json.len() as u32).to_le_bytes())?;
        f.write_all(&header_json)?;
        f.write_all(&data)?;
        f.sync_all()?;
    }
    fs::rename(&partial, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TransformerModel<f32>, CheckpointError> {
    let bytes = fs::read(path)?;
    if bytes.len() < MAGIC.len() + 4 {
        return Err(CheckpointError::Truncated("missing magic or header length"));
    }
    let (magic, rest) = bytes.split_at(MAGIC.len());
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic.to_vec()));
    }
    let (len_bytes, rest) = rest.split_at(4);
    let header_len = u32::from_le_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
    if rest.len() < header_len {
        return Err(CheckpointError::Truncated("header shorter than stated"));
    }
    let (header_bytes, data) = rest.split_at(header_len);
    let header: Header = serde_json::from_slice(header_bytes)?;

    let mut params: BTreeMap<ParamId, Tensor<f32>> = BTreeMap::new();
    let mut cursor = 0u64;
    for entry in &header.tensors {
        if entry.offset != cursor {
            return Err(CheckpointError::BadOffset {
                name: entry.name.clone(),
                stated: entry.offset,
                actual: cursor,
            });
        }
        let n: usize = entry.shape.iter().product();
        let start = cursor as usize;
        let end = start + n * 4;
        if end > data.len() {
            return Err(CheckpointError::DataLength {
                got: data.len(),
                want: end,
            });
        }
        let values: Vec<f32> = data[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let id = ParamId::new(entry.name.clone());
        let tensor = Tensor::from_vec(&entry.shape, values)
            .map_err(|_| CheckpointError::Truncated("tensor shape/data mismatch"))?
            .with_tag(id.clone());
        params.insert(id, tensor);
        cursor = end as u64;
    }
    if cursor as usize != data.len() {
        return Err(CheckpointError::DataLength {
            got: data.len(),
            want: cursor as usize,
        });
    }

    let layer_dims = reconstruct_layer_dims(&header.config, &params)?;
    Ok(TransformerModel::from_parts(
        header.config,
        layer_dims,
        params,
    )?)
}

fn partial_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".partial");
    s.into()
}

fn reconstruct_layer_dims(
    config: &ModelConfig,
    params: &BTreeMap<ParamId, Tensor<f32>>,
) -> Result<Vec<LayerDims>, CheckpointError> {
    let mut dims = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let fetch = |suffix: &str| -> Result<&Tensor<f32>, CheckpointError> {
            let id = ParamId::layer(l, suffix);
            params
                .get(&id)
                .ok_or(CheckpointError::Truncated("missing layer tensor"))
        };
        let attn_rows = fetch("q_proj")?.rows();
        if attn_rows % config.head_dim != 0 {
            return Err(CheckpointError::RaggedHeads {
                layer: l,
                what: "attention",
                got: attn_rows,
                head_dim: config.head_dim,
            });
        }
        dims.push(LayerDims {
            n_heads: attn_rows / config.head_dim,
            ffn_dim: fetch("gate_proj")?.rows(),
        });
    }
    Ok(dims)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Scalar;

    fn toy() -> TransformerModel<f32> {
        TransformerModel::build(ModelConfig {
            rng_seed: 21,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m = toy();
        save(&m, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(m.checksum(), back.checksum());
        assert_eq!(m.config(), back.config());
        assert_eq!(m.layer_dims(), back.layer_dims());
        let ids = [257usize, 9, 17, 101];
        let a = m.logits(&ids).unwrap();
        let b = back.logits(&ids).unwrap();
        assert_eq!(a.max_abs_diff(&b).unwrap(), 0.0);
        assert!(!path.with_extension("ckpt.partial").exists());
    }

    #[test]
    fn round_trip_preserves_uneven_layer_widths() {
        let m = toy();
        // Shrink layer 0 by one head and two FFN channels by hand.
        let hd = m.config().head_dim;
        let mut params = m.params().clone();
        for suffix in ["q_proj", "k_proj", "v_proj"] {
            let id = ParamId::layer(0, suffix);
            let t = params[&id].remove_row_blocks(hd, &[1]).unwrap().with_tag(id.clone());
            params.insert(id, t);
        }
        let id = ParamId::layer(0, "o_proj");
        let t = params[&id].remove_col_blocks(hd, &[1]).unwrap().with_tag(id.clone());
        params.insert(id, t);
        for suffix in ["gate_proj", "up_proj"] {
            let id = ParamId::layer(0, suffix);
            let t = params[&id].remove_row_blocks(1, &[3, 40]).unwrap().with_tag(id.clone());
            params.insert(id, t);
        }
        let id = ParamId::layer(0, "down_proj");
        let t = params[&id].remove_col_blocks(1, &[3, 40]).unwrap().with_tag(id.clone());
        params.insert(id, t);

        let mut layer_dims = m.layer_dims().to_vec();
        layer_dims[0] = LayerDims {
            n_heads: 3,
            ffn_dim: 62,
        };
        let pruned =
            TransformerModel::from_parts(m.config().clone(), layer_dims, params).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pruned.ckpt");
        save(&pruned, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.layer_dims()[0].n_heads, 3);
        assert_eq!(back.layer_dims()[0].ffn_dim, 62);
        assert_eq!(pruned.checksum(), back.checksum());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&toy(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();

        let mut garbled = bytes.clone();
        garbled[0] = b'X';
        let bad = dir.path().join("bad.ckpt");
        fs::write(&bad, &garbled).unwrap();
        assert!(matches!(load(&bad), Err(CheckpointError::BadMagic(_))));

        bytes.truncate(bytes.len() - 17);
        fs::write(&bad, &bytes).unwrap();
        assert!(matches!(load(&bad), Err(CheckpointError::DataLength { .. })));

        fs::write(&bad, &bytes[..6]).unwrap();
        assert!(matches!(load(&bad), Err(CheckpointError::Truncated(_))));
    }

    #[test]
    fn precision_note_f32_payload() {
        // The on-disk payload is always f32; a f64 model must be cast first.
        let m64: TransformerModel<f64> = toy().cast();
        let m32: TransformerModel<f32> = m64.cast();
        assert_eq!(m32.checksum(), toy().checksum());
        assert_eq!(f32::NAME, "f32");
    }
}
