//! Single-file checkpoint archive.
//!
//! ```text
//! magic     4 bytes  "VPCK"
//! version   u16 LE
//! meta_len  u32 LE, then meta_len bytes of UTF-8 JSON metadata
//! blobs     u32 LE count, then per blob:
//!             name_len u16 LE, name (UTF-8)
//!             rank u8, rank × u32 LE dims
//!             prod(dims) × f32 LE
//! ```
//!
//! Blob names are `net/<network>/<parameter>` for weights and
//! `opt/<network>/<parameter>` for momentum buffers.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use super::config::{Recipe, TrainConfig};
use super::report::EpochRecord;
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamSet;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VPCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Sub-network names used inside checkpoints.
pub const STUDENT: &str = "student";
pub const POSE: &str = "pose";
pub const VPN: &str = "vpn";

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub params: ParamSet,
    pub frozen: bool,
    /// Momentum buffers; empty for frozen networks.
    pub velocity: BTreeMap<String, Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub recipe: Recipe,
    pub config: TrainConfig,
    pub config_hash: String,
    /// Hash of the dataset configuration the run was trained on.
    pub data_hash: String,
    /// Number of completed epochs.
    pub epoch: usize,
    pub networks: BTreeMap<String, Network>,
    pub history: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    recipe: Recipe,
    config: TrainConfig,
    config_hash: String,
    data_hash: String,
    epoch: usize,
    frozen: BTreeMap<String, bool>,
    history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn network(&self, name: &str) -> Result<&Network> {
        self.networks.get(name).ok_or_else(|| {
            Error::Incompatible(format!(
                "{} checkpoint has no `{name}` network",
                self.recipe
            ))
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Metadata {
            recipe: self.recipe,
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            data_hash: self.data_hash.clone(),
            epoch: self.epoch,
            frozen: self.networks.iter().map(|(k, n)| (k.clone(), n.frozen)).collect(),
            history: self.history.clone(),
        };
        let json = serde_json::to_vec(&meta).map_err(|e| Error::Data(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);

        let mut blobs: Vec<(String, &Tensor)> = Vec::new();
        for (net, n) in &self.networks {
            for (p, v) in n.params.iter() {
                blobs.push((format!("net/{net}/{p}"), v));
            }
            for (p, v) in &n.velocity {
                blobs.push((format!("opt/{net}/{p}"), v));
            }
        }
        out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
        for (name, v) in blobs {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Data(format!("blob name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(v.ndim() as u8);
            for &d in v.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in v.iter() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::MalformedHeader("not a checkpoint (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::MalformedHeader(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta: Metadata = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::MalformedHeader(format!("checkpoint metadata: {e}")))?;
        let mut networks: BTreeMap<String, Network> = meta
            .frozen
            .iter()
            .map(|(k, &frozen)| {
                (
                    k.clone(),
                    Network {
                        params: ParamSet::new(),
                        frozen,
                        velocity: BTreeMap::new(),
                    },
                )
            })
            .collect();
        let count = r.u32()?;
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::MalformedHeader("blob name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let n: usize = dims.iter().product();
            let payload = r.take(4 * n)?;
            let data: Vec<f64> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("checkpoint blob {name}")));
            }
            let tensor = Tensor::from_shape_vec(IxDyn(&dims), data).unwrap();
            let mut parts = name.splitn(3, '/');
            let (kind, net, param) = match (parts.next(), parts.next(), parts.next()) {
                (Some(k), Some(n), Some(p)) => (k, n, p),
                _ => return Err(Error::MalformedHeader(format!("bad blob name `{name}`"))),
            };
            let entry = networks
                .get_mut(net)
                .ok_or_else(|| Error::MalformedHeader(format!("blob for undeclared network `{net}`")))?;
            match kind {
                "net" => entry.params.insert(param, tensor),
                "opt" => {
                    entry.velocity.insert(param.to_string(), tensor);
                }
                _ => return Err(Error::MalformedHeader(format!("bad blob kind `{kind}`"))),
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} trailing bytes after the last blob",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            recipe: meta.recipe,
            config: meta.config,
            config_hash: meta.config_hash,
            data_hash: meta.data_hash,
            epoch: meta.epoch,
            networks,
            history: meta.history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingCheckpoint(path.display().to_string()),
            _ => Error::io(path, e),
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::MalformedHeader(format!(
                "truncated checkpoint at byte {}",
                self.pos
            ))),
        }
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
