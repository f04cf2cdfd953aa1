//! Checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! | field            | encoding                                         |
//! |------------------|--------------------------------------------------|
//! | magic            | `DCPK`                                           |
//! | version          | u32                                              |
//! | config           | u64 byte length, UTF-8 text                      |
//! | tensor count     | u32                                              |
//! | each tensor      | u32 name length, UTF-8 name, u32 rank, rank × u64 dims, f32 payload |
//! | checksum         | u32 CRC-32 of every preceding byte               |

use crate::codec::write_atomic;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use discopatch_core::{DisCoPatch, Tensor};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"DCPK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Checks magic, version and checksum before parsing the body.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let truncated = |detail: &str| Error::Truncated {
            path: path.into(),
            detail: detail.into(),
        };
        if bytes.len() < 4 {
            return Err(truncated("shorter than the magic"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::BadMagic { path: path.into() });
        }
        if bytes.len() < 12 {
            return Err(truncated("header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::VersionMismatch {
                path: path.into(),
                found: version,
                expected: VERSION,
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);

        let mut r = Reader { bytes: body, pos: 8 };
        let parsed = (|| -> Option<Checkpoint> {
            let len = r.u64()? as usize;
            let config = String::from_utf8(r.take(len)?.to_vec()).ok()?;
            let count = r.u32()?;
            let mut tensors = Vec::with_capacity(count.min(4096) as usize);
            for _ in 0..count {
                let nl = r.u32()? as usize;
                let name = String::from_utf8(r.take(nl)?.to_vec()).ok()?;
                let rank = r.u32()? as usize;
                let mut dims = Vec::with_capacity(rank.min(16));
                for _ in 0..rank {
                    dims.push(usize::try_from(r.u64()?).ok()?);
                }
                let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d))?;
                let raw = r.take(n.checked_mul(4)?)?;
                let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                tensors.push((name, Tensor::new(&dims, data).ok()?));
            }
            (r.pos == body.len()).then_some(Checkpoint { config, tensors })
        })();
        if stored != computed {
            // A short file usually shows up as a checksum failure too; report
            // the structural problem when the body does not parse.
            return Err(match parsed {
                None => truncated("body ends before the declared contents"),
                Some(_) => Error::Checksum {
                    path: path.into(),
                    stored,
                    computed,
                },
            });
        }
        parsed.ok_or_else(|| Error::Malformed {
            path: path.into(),
            detail: "checksum matches but the body does not parse".into(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

pub fn save_model(path: &Path, model: &DisCoPatch<f32>, config: &RunConfig) -> Result<()> {
    Checkpoint {
        config: config.to_toml(),
        tensors: model.state_tensors(),
    }
    .save(path)
}

/// Rebuilds the model described by the stored configuration and loads every
/// tensor into it.
pub fn load_model(path: &Path) -> Result<(DisCoPatch<f32>, RunConfig)> {
    let ck = Checkpoint::load(path)?;
    let config = RunConfig::parse(&ck.config)?;
    let mut model = DisCoPatch::new(config.model_config()?, 0)?;
    let table: std::collections::HashMap<&str, &Tensor<f32>> = ck.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    model.load_state(&|name| table.get(name).map(|t| (*t).clone()))?;
    Ok((model, config))
}
