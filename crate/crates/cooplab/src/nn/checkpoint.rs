//! Checkpoint container: parameter name -> shape + flat little-endian
//! f64 buffer, plus a JSON metadata blob and a format version.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"CPCK"
//! version u32            (currently 1)
//! role    u8             (0 = pretrained-encoder, 1 = finetuned-model)
//! meta    u32 length + UTF-8 JSON
//! count   u32
//! per parameter:
//!   name  u32 length + UTF-8
//!   rank  u32, dims u32 x rank
//!   data  f64 x numel
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NnError, ParamSet, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckpointRole {
    PretrainedEncoder,
    FinetunedModel,
}

impl CheckpointRole {
    fn to_byte(self) -> u8 {
        match self {
            CheckpointRole::PretrainedEncoder => 0,
            CheckpointRole::FinetunedModel => 1,
        }
    }

    fn from_byte(b: u8) -> Result<CheckpointRole> {
        match b {
            0 => Ok(CheckpointRole::PretrainedEncoder),
            1 => Ok(CheckpointRole::FinetunedModel),
            other => Err(NnError::Checkpoint(format!("unknown role byte {other}"))),
        }
    }
}

/// Training provenance stored alongside the weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub role: CheckpointRole,
    pub steps: u64,
    pub final_loss: f64,
    /// Resolved run configuration, echoed verbatim.
    pub config_echo: serde_json::Value,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn from_params(meta: CheckpointMeta, set: &ParamSet, filter: impl Fn(&str) -> bool) -> Checkpoint {
        let params = set
            .iter()
            .filter(|p| filter(&p.name))
            .map(|p| (p.name.clone(), p.shape.clone(), p.value.clone()))
            .collect();
        Checkpoint { meta, params }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|(_, _, v)| v.len()).sum()
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.push(ckpt.meta.role.to_byte());
    let meta = serde_json::to_vec(&ckpt.meta).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta);
    buf.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for (name, shape, value) in &ckpt.params {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in value {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cursor = Cursor { bytes: &bytes, pos: 0 };
    let magic = cursor.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(NnError::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = cursor.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!(
            "format version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let role = CheckpointRole::from_byte(cursor.u8()?)?;
    let meta_len = cursor.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(cursor.take(meta_len)?)
        .map_err(|e| NnError::Checkpoint(format!("bad metadata: {e}")))?;
    if meta.role != role {
        return Err(NnError::Checkpoint("role byte and metadata disagree".into()));
    }
    let count = cursor.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cursor.u32()? as usize;
        let name = String::from_utf8(cursor.take(name_len)?.to_vec())
            .map_err(|e| NnError::Checkpoint(format!("bad name: {e}")))?;
        let rank = cursor.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cursor.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cursor.take(numel * 8)?;
        let value: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        params.push((name, shape, value));
    }
    Ok(Checkpoint { meta: CheckpointMeta { role, ..meta }, params })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(NnError::Checkpoint("truncated file".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                role: CheckpointRole::PretrainedEncoder,
                steps: 42,
                final_loss: 0.125,
                config_echo: serde_json::json!({"mask_ratio": 0.7}),
            },
            params: vec![
                ("enc.w".into(), vec![2, 3], vec![0.1, -0.2, 0.3, 1.0e-300, f64::MIN_POSITIVE, 7.0]),
                ("enc.b".into(), vec![3], vec![0.0, -0.0, 2.5]),
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let ckpt = sample();
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.params.len(), ckpt.params.len());
        for ((n0, s0, v0), (n1, s1, v1)) in ckpt.params.iter().zip(&loaded.params) {
            assert_eq!(n0, n1);
            assert_eq!(s0, s1);
            let bits0: Vec<u64> = v0.iter().map(|v| v.to_bits()).collect();
            let bits1: Vec<u64> = v1.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits0, bits1);
        }
        assert_eq!(loaded.meta.steps, 42);
        // Saving again produces identical bytes.
        let path2 = dir.path().join("ck2.bin");
        save_checkpoint(&path2, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn version_mismatch_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&path, &sample()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99; // corrupt the version field
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn bad_magic_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("notck.bin");
        std::fs::write(&path, b"JUNKJUNKJUNK").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
