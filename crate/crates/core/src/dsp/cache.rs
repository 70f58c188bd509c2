//! On-disk tensor cache: one `<clip_id>.<cfg-hash>.mst` file per clip holding
//! the ASCII shape header `224 224 3\n` followed by little-endian f32 values.

use std::io::Write;
use std::path::{Path, PathBuf};

use super::{DspConfig, SpectrogramTensor};
use crate::error::{Error, Result};

const HEADER: &str = "224 224 3\n";

pub fn encode(t: &SpectrogramTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER.len() + 4 * t.data.len());
    out.extend_from_slice(HEADER.as_bytes());
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<SpectrogramTensor> {
    let body = bytes
        .strip_prefix(HEADER.as_bytes())
        .ok_or_else(|| Error::Shape("tensor file lacks the `224 224 3` header".into()))?;
    if body.len() != 4 * SpectrogramTensor::LEN {
        return Err(Error::Shape(format!(
            "tensor file body has {} bytes, expected {}",
            body.len(),
            4 * SpectrogramTensor::LEN
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    SpectrogramTensor::from_hwc(data)
}

pub fn read_tensor(path: &Path) -> Result<SpectrogramTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write_tensor(path: &Path, t: &SpectrogramTensor) -> Result<()> {
    std::fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TensorCache {
    dir: PathBuf,
    cfg_hash: String,
}

impl TensorCache {
    pub fn new(dir: impl Into<PathBuf>, cfg: &DspConfig) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            cfg_hash: cfg.hash(),
        })
    }

    pub fn path(&self, clip_id: &str) -> PathBuf {
        self.dir.join(format!("{clip_id}.{}.mst", self.cfg_hash))
    }

    pub fn contains(&self, clip_id: &str) -> bool {
        self.path(clip_id).is_file()
    }

    pub fn get(&self, clip_id: &str) -> Result<SpectrogramTensor> {
        read_tensor(&self.path(clip_id)).map_err(|e| e.with_clip(clip_id))
    }

    /// Writes the tensor unless an entry already exists. The file appears
    /// atomically, so concurrent writers of the same clip are harmless.
    /// Returns whether this call created the entry.
    pub fn insert_if_absent(&self, clip_id: &str, t: &SpectrogramTensor) -> Result<bool> {
        let dst = self.path(clip_id);
        if dst.is_file() {
            return Ok(false);
        }
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        tmp.write_all(&encode(t)).map_err(|e| Error::io(tmp.path(), e))?;
        match tmp.persist_noclobber(&dst) {
            Ok(_) => Ok(true),
            Err(e) if e.error.kind() == std::io::ErrorKind::AlreadyExists => Ok(false),
            Err(e) => Err(Error::io(&dst, e.error)),
        }
    }
}
