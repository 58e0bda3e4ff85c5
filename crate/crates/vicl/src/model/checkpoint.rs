//! VITC checkpoint files.
//!
//! Layout: magic "VITC", version u16, u32 JSON length, the JSON metadata
//! blob, then parameter tensors in sorted-name order, each as
//! (u16 name length, name bytes, u8 ndim, ndim x u32 dims, f32 LE data).
//! Round-trips are byte-exact.

use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Params, Slot};

pub const VITC_MAGIC: &[u8; 4] = b"VITC";
pub const VITC_VERSION: u16 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub tool_version: String,
    /// Hash of the codebook this model was trained against; eval refuses a
    /// mismatching codebook.
    pub codebook_sha256: Option<String>,
    /// Free-form blob for the owning stage (the trainer stores its config
    /// here verbatim).
    #[serde(default)]
    pub extra: serde_json::Value,
}

fn sorted_slots(cfg: &ModelConfig) -> Vec<(String, Slot)> {
    let mut named: Vec<(String, Slot)> = Params::<f32>::slots(cfg)
        .into_iter()
        .map(|s| (s.name(), s))
        .collect();
    named.sort_by(|a, b| a.0.cmp(&b.0));
    named
}

pub fn save_checkpoint(path: &Path, params: &Params<f32>, meta: &CheckpointMeta) -> Result<()> {
    let json = serde_json::to_string(meta).map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(VITC_MAGIC);
    buf.extend_from_slice(&VITC_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(json.as_bytes());
    for (name, slot) in sorted_slots(&meta.model) {
        let data = params.get(slot);
        let shape = Params::<f32>::shape(&meta.model, slot);
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(shape.len() as u8);
        for &dim in &shape {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Params<f32>, CheckpointMeta)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::NotFound(path.display().to_string())
            } else {
                Error::Io(e)
            }
        })?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 10 || &bytes[0..4] != VITC_MAGIC {
        return Err(Error::Format(format!("{}: not a VITC file", path.display())));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VITC_VERSION {
        return Err(Error::Format(format!("unsupported VITC version {version}")));
    }
    let json_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    if bytes.len() < 10 + json_len {
        return Err(Error::Format("truncated checkpoint header".into()));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[10..10 + json_len])
        .map_err(|e| Error::Format(format!("bad checkpoint metadata: {e}")))?;
    meta.model.validate()?;

    let mut params = Params::<f32>::zeros(&meta.model);
    let mut off = 10 + json_len;
    for (name, slot) in sorted_slots(&meta.model) {
        if off + 2 > bytes.len() {
            return Err(Error::Format(format!("truncated before tensor {name}")));
        }
        let name_len = u16::from_le_bytes([bytes[off], bytes[off + 1]]) as usize;
        off += 2;
        let found = std::str::from_utf8(&bytes[off..off + name_len])
            .map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
        if found != name {
            return Err(Error::Format(format!(
                "expected tensor {name}, found {found}"
            )));
        }
        off += name_len;
        let ndim = bytes[off] as usize;
        off += 1;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(u32::from_le_bytes([
                bytes[off],
                bytes[off + 1],
                bytes[off + 2],
                bytes[off + 3],
            ]) as usize);
            off += 4;
        }
        let want_shape = Params::<f32>::shape(&meta.model, slot);
        if dims != want_shape {
            return Err(Error::Format(format!(
                "tensor {name}: shape {dims:?} does not match config {want_shape:?}"
            )));
        }
        let count: usize = dims.iter().product();
        if off + count * 4 > bytes.len() {
            return Err(Error::Format(format!("truncated data for tensor {name}")));
        }
        let dst = params.get_mut(slot);
        for (i, v) in dst.iter_mut().enumerate().take(count) {
            let o = off + i * 4;
            *v = f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
        }
        off += count * 4;
    }
    if off != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - off
        )));
    }
    Ok((params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_mlp: 32,
            vocab: 11,
            context_len: 64,
            rope_base: 10000.0,
            norm_eps: 1e-5,
            cond_classes: Some(4),
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_exact() {
        let c = cfg();
        let params = init_params(&c, 3).unwrap();
        let meta = CheckpointMeta {
            model: c,
            tool_version: "test".into(),
            codebook_sha256: Some("ab".repeat(32)),
            extra: serde_json::json!({"note": 1}),
        };
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.vitc");
        let p2 = dir.path().join("b.vitc");
        save_checkpoint(&p1, &params, &meta).unwrap();
        let (loaded, meta2) = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded, params);
        assert_eq!(meta2.codebook_sha256, meta.codebook_sha256);
        save_checkpoint(&p2, &loaded, &meta2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let c = cfg();
        let params = init_params(&c, 3).unwrap();
        let meta = CheckpointMeta {
            model: c,
            tool_version: "test".into(),
            codebook_sha256: None,
            extra: serde_json::Value::Null,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.vitc");
        save_checkpoint(&path, &params, &meta).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 7);
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn missing_checkpoint_is_not_found() {
        let err = load_checkpoint(Path::new("/nonexistent/x.vitc")).unwrap_err();
        assert_eq!(err.kind(), "not-found");
    }
}
