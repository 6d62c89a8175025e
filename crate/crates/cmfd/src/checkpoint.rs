//! Backbone checkpoints.
//!
//! Layout, little-endian: magic `CMFDCKPT`, `u32` version, `u64` length and
//! JSON text of the [`BackboneConfig`], `u64` tensor count, then per tensor
//! `u32` name length, name, `u32` rank, `u64` dims, `f64` values. A SHA-256
//! digest of everything before it closes the file.

use std::fs;
use std::path::{Path, PathBuf};

use cmfd_core::backbone::{Backbone, BackboneConfig, ParamTensor, Params};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CMFDCKPT";
pub const VERSION: u32 = 1;

/// Directory searched for `backbone.ckpt` when no checkpoint is given.
pub const CACHE_ENV: &str = "CMFD_CHECKPOINT_DIR";
pub const DEFAULT_NAME: &str = "backbone.ckpt";

pub fn encode(model: &Backbone) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(model.config()).map_err(|e| Error::Internal(e.to_string()))?;
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(model.params().len() as u64).to_le_bytes());
    for t in model.params().iter() {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<usize, String> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| format!("length {v} too large"))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Backbone, String> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..8] != MAGIC {
        return Err("not a checkpoint file".into());
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err("checksum mismatch".into());
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let n = r.u64()?;
    let config: BackboneConfig = serde_json::from_slice(r.take(n)?).map_err(|e| e.to_string())?;
    let count = r.u64()?;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|e| e.to_string())?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64()).collect::<std::result::Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let data = r
            .take(numel * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(ParamTensor { name, shape, data });
    }
    if r.pos != body.len() {
        return Err("trailing bytes".into());
    }
    let params = Params::from_tensors(tensors).map_err(|e| e.to_string())?;
    Backbone::from_params(config, &params).map_err(|e| e.to_string())
}

pub fn save(path: &Path, model: &Backbone) -> Result<()> {
    crate::io::ensure_parent(path)?;
    fs::write(path, encode(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Backbone> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|m| Error::data(path, m))
}

/// An explicit path, else `$CMFD_CHECKPOINT_DIR/backbone.ckpt` if present.
pub fn resolve(explicit: Option<&Path>) -> Option<PathBuf> {
    if let Some(p) = explicit {
        return Some(p.to_path_buf());
    }
    let dir = std::env::var_os(CACHE_ENV)?;
    let p = Path::new(&dir).join(DEFAULT_NAME);
    p.exists().then_some(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Backbone {
        let mut cfg = BackboneConfig::tiny(4);
        cfg.tiny_width = 8;
        cfg.aspp_channels = 8;
        cfg.decoder_channels = 8;
        Backbone::with_random_init(cfg, 3).unwrap()
    }

    #[test]
    fn round_trip_preserves_everything() {
        let m = model();
        let back = decode(&encode(&m).unwrap()).unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(back.params(), m.params());
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode(&model()).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(decode(&bytes).unwrap_err().contains("checksum"));
        assert!(decode(b"nonsense").is_err());
    }
}
