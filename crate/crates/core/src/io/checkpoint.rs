//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! "KEVO" | u32 version | u32 tensor count
//! per tensor: u32 name length | name | u32 rank | u64 dims[rank] | u8 dtype | f32 data[..]
//! u32 mask length | mask text (empty when absent)
//! u32 meta length | meta JSON
//! u32 CRC-32 of every preceding byte
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::ParamStore;
use crate::split::{SplitError, SplitMask};
use crate::tensor::{Scalar, Tensor};

use super::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"KEVO";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Mask(#[from] SplitError),
}

/// Free-form run metadata stored alongside the tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// Generations completed when the checkpoint was taken.
    pub generation: usize,
    /// Graph description (TOML) the tensors belong to.
    #[serde(default)]
    pub graph: Option<String>,
    /// Echo of the experiment configuration (TOML).
    #[serde(default)]
    pub config: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore<f32>,
    pub mask: Option<SplitMask>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend(CHECKPOINT_VERSION.to_le_bytes());
        out.extend((self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend((t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend((d as u64).to_le_bytes());
            }
            out.push(f32::DTYPE_TAG);
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        let mask = self.mask.as_ref().map(SplitMask::to_text).unwrap_or_default();
        out.extend((mask.len() as u32).to_le_bytes());
        out.extend_from_slice(mask.as_bytes());
        let meta = serde_json::to_string(&self.meta).expect("meta serializes");
        out.extend((meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        let crc = crc32fast::hash(&out);
        out.extend(crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::Magic);
        }
        if bytes.len() < 16 {
            return Err(CheckpointError::Truncated(bytes.len()));
        }
        let (payload, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(payload);
        let mut r = Reader { buf: payload, pos: 4 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let dtype = r.take(1)?[0];
            if dtype != f32::DTYPE_TAG {
                return Err(CheckpointError::Format(format!(
                    "tensor `{name}` has unsupported dtype tag {dtype}"
                )));
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| CheckpointError::Format(format!("tensor `{name}` is too large")))?;
            let raw = r.take(numel.checked_mul(4).ok_or(CheckpointError::Truncated(r.pos))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Format(format!("tensor `{name}`: {e}")))?;
            if params.insert(name.clone(), t).is_some() {
                return Err(CheckpointError::Format(format!("duplicate tensor `{name}`")));
            }
        }
        let mask_text = r.string()?;
        let mask = if mask_text.is_empty() {
            None
        } else {
            Some(SplitMask::from_text(&mask_text)?)
        };
        let meta_text = r.string()?;
        let meta = serde_json::from_str(&meta_text).map_err(|e| CheckpointError::Format(format!("metadata: {e}")))?;
        if r.pos != payload.len() {
            return Err(CheckpointError::Format(format!(
                "{} trailing bytes",
                payload.len() - r.pos
            )));
        }
        Ok(Self { params, mask, meta })
    }

    /// Writes to a temporary sibling file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_atomic(path, &self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(CheckpointError::Truncated(self.buf.len()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Format("invalid UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_architecture, Family};
    use crate::split::kels_split;

    fn sample() -> Checkpoint {
        let g = build_architecture(Family::ToyResnet, 3, [3, 8, 8]).unwrap();
        Checkpoint {
            params: g.init_params(5),
            mask: Some(kels_split(&g, 0.5).unwrap()),
            meta: CheckpointMeta {
                generation: 2,
                graph: None,
                config: Some("seed = 5".into()),
            },
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        for (k, t) in ck.params.iter() {
            let bits: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            let back_bits: Vec<u32> = back.params.get(k).unwrap().data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, back_bits);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::Checksum { .. })
        ));
    }

    #[test]
    fn version_and_magic_are_checked() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::Version { found: 9, .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(b"NOPE0000000000000000"),
            Err(CheckpointError::Magic)
        ));
    }

    #[test]
    fn partial_file_does_not_load() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() / 3]).is_err());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen-2.kevo");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }
}
