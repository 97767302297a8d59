//! Checkpoint format: a self-contained little-endian snapshot of every
//! model tensor (frozen bases included) with the model config embedded as
//! JSON and a trailing SHA-256 over the whole payload.

use std::path::Path;

use sha2::{Digest, Sha256};

use gasp_core::model::{init_model, ModelConfig, ToyModel};

use crate::errors::CliError;

pub const CKPT_MAGIC: &[u8; 8] = b"GASPCKPT";
pub const CKPT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

pub fn encode_checkpoint(model: &ToyModel) -> Result<Vec<u8>, CliError> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let config_json = serde_json::to_vec(&model.config)?;
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&config_json);

    let ids: Vec<_> = model.store.ids().collect();
    out.extend_from_slice(&(ids.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for &id in &ids {
        let name = model.store.name(id).as_bytes();
        let t = model.store.tensor(id);
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(DTYPE_F64);
        out.extend_from_slice(&(t.rows as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols as u32).to_le_bytes());
        out.extend_from_slice(&offset.to_le_bytes());
        offset += (t.values.len() * 8) as u64;
    }
    out.extend_from_slice(&offset.to_le_bytes());
    for &id in &ids {
        for &v in &model.store.tensor(id).values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn save_checkpoint(path: &Path, model: &ToyModel) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

/// Rebuilds the model stored at `bytes`. The embedded config is
/// authoritative; when `expected` is given, each tensor shape it implies
/// is checked against the file before any weight is accepted.
pub fn decode_checkpoint(
    bytes: &[u8],
    expected: Option<&ModelConfig>,
) -> Result<ToyModel, CliError> {
    let corrupt = |m: &str| CliError::CorruptCheckpoint(m.into());
    if bytes.len() < 44 {
        return Err(corrupt("file is shorter than any valid checkpoint"));
    }
    let (payload, checksum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(payload).as_slice() != checksum {
        return Err(corrupt("checksum mismatch"));
    }
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], CliError> {
        if pos + n > payload.len() {
            return Err(corrupt("truncated payload"));
        }
        let s = &payload[pos..pos + n];
        pos += n;
        Ok(s)
    };
    if take(8)? != CKPT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(CliError::CorruptCheckpoint(format!("unknown version {version}")));
    }
    let json_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let config: ModelConfig = serde_json::from_slice(take(json_len)?)?;

    let n_tensors = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut entries = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec())
            .map_err(|_| corrupt("tensor name is not UTF-8"))?;
        if take(1)?[0] != DTYPE_F64 {
            return Err(corrupt("unsupported dtype"));
        }
        let rows = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let offset = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        entries.push(TensorEntry { name, rows, cols, offset });
    }
    let data_len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let data = take(data_len)?;
    if pos != payload.len() {
        return Err(corrupt("trailing bytes after tensor data"));
    }

    // Shape-check against the caller's config before touching weights.
    let mut model = init_model(config.clone(), 0)?;
    if let Some(exp) = expected {
        let reference = init_model(exp.clone(), 0)?;
        let ref_ids: Vec<_> = reference.store.ids().collect();
        for (&id, entry) in ref_ids.iter().zip(&entries) {
            let t = reference.store.tensor(id);
            let name = reference.store.name(id);
            if name != entry.name || t.rows != entry.rows || t.cols != entry.cols {
                return Err(CliError::ConfigMismatch {
                    name: entry.name.clone(),
                    expected: (t.rows, t.cols),
                    found: (entry.rows, entry.cols),
                });
            }
        }
        if ref_ids.len() != entries.len() {
            return Err(corrupt("tensor count does not match the config"));
        }
    }

    let ids: Vec<_> = model.store.ids().collect();
    if ids.len() != entries.len() {
        return Err(corrupt("tensor count does not match the embedded config"));
    }
    for (&id, entry) in ids.iter().zip(&entries) {
        let (rows, cols) = {
            let t = model.store.tensor(id);
            (t.rows, t.cols)
        };
        if model.store.name(id) != entry.name {
            return Err(corrupt("tensor table order does not match the embedded config"));
        }
        if rows != entry.rows || cols != entry.cols {
            return Err(CliError::ConfigMismatch {
                name: entry.name.clone(),
                expected: (rows, cols),
                found: (entry.rows, entry.cols),
            });
        }
        let n = rows * cols;
        let start = entry.offset;
        let end = start + n * 8;
        if end > data.len() {
            return Err(corrupt("tensor data out of bounds"));
        }
        let dst = model.store.tensor_mut(id);
        for (i, chunk) in data[start..end].chunks_exact(8).enumerate() {
            dst.values[i] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    Ok(model)
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<ToyModel, CliError> {
    let bytes = std::fs::read(path).map_err(|e| {
        CliError::CorruptCheckpoint(format!("cannot read {}: {e}", path.display()))
    })?;
    decode_checkpoint(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_emb: 4,
            lora_rank: 2,
            lora_alpha: 4.0,
            head_layers: vec![1, 2],
            vocab_size: 8,
            max_frames: 4,
            patches_per_frame: 16,
            feature_dim: 8,
            max_lang_len: 5,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let model = init_model(tiny_config(), 42).unwrap();
        let bytes = encode_checkpoint(&model).unwrap();
        let loaded = decode_checkpoint(&bytes, None).unwrap();
        assert_eq!(loaded.config, model.config);
        let again = encode_checkpoint(&loaded).unwrap();
        assert_eq!(bytes, again);
        // Loading with a different init seed still restores the weights.
        for (a, b) in model.store.ids().zip(loaded.store.ids()) {
            assert_eq!(model.store.tensor(a).values, loaded.store.tensor(b).values);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let model = init_model(tiny_config(), 42).unwrap();
        let bytes = encode_checkpoint(&model).unwrap();
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0xff;
        assert!(matches!(
            decode_checkpoint(&flipped, None),
            Err(CliError::CorruptCheckpoint(_))
        ));
        let truncated = &bytes[..bytes.len() - 7];
        assert!(matches!(
            decode_checkpoint(truncated, None),
            Err(CliError::CorruptCheckpoint(_))
        ));
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'Z';
        // The checksum catches the edit before the magic check can.
        assert!(decode_checkpoint(&bad_magic, None).is_err());
    }

    #[test]
    fn mismatched_config_reports_both_shapes() {
        let model = init_model(tiny_config(), 42).unwrap();
        let bytes = encode_checkpoint(&model).unwrap();
        let wider = ModelConfig { d_model: 32, d_emb: 8, ..tiny_config() };
        match decode_checkpoint(&bytes, Some(&wider)) {
            Err(CliError::ConfigMismatch { name, expected, found }) => {
                assert!(!name.is_empty());
                assert_ne!(expected, found);
            }
            other => panic!("expected ConfigMismatch, got {other:?}"),
        }
        // A matching explicit config is accepted.
        decode_checkpoint(&bytes, Some(&tiny_config())).unwrap();
    }
}
