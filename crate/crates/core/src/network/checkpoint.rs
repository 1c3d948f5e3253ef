//! Checkpoint files: architecture JSON, a manifest and raw tensor blobs.
//!
//! ```text
//! "EXCK" | version u32 | header_len u64 | header JSON | blob | blob | ...
//! ```
//!
//! The header holds the resolved architecture, a manifest mapping each
//! tensor name to the byte offset and length of its blob (relative to the
//! first blob), and free-form metadata. Each blob is one tensor in the
//! binary tensor format.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::MultiExitNetwork;
use super::spec::ArchConfig;
use crate::error::{Error, Result};
use crate::tensor::{format, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"EXCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    architecture: ArchConfig,
    manifest: Vec<ManifestEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub architecture: ArchConfig,
    pub tensors: Vec<(String, Tensor<T>)>,
    pub meta: serde_json::Value,
}

const RUNNING_MEAN: &str = ".running_mean";
const RUNNING_VAR: &str = ".running_var";

impl<T: Real> Checkpoint<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor named {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blobs = Vec::new();
        let mut manifest = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let enc = format::encode(t);
            manifest.push(ManifestEntry {
                name: name.clone(),
                offset: blobs.len() as u64,
                length: enc.len() as u64,
            });
            blobs.extend_from_slice(&enc);
        }
        let header = serde_json::to_vec(&Header {
            architecture: self.architecture.resolved(),
            manifest,
            meta: self.meta.clone(),
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + blobs.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&blobs);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let blob_start = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("checkpoint header truncated".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..blob_start])?;
        let blobs = &bytes[blob_start..];
        let mut tensors = Vec::with_capacity(header.manifest.len());
        for e in &header.manifest {
            let (start, len) = (e.offset as usize, e.length as usize);
            let slice = blobs
                .get(start..start + len)
                .ok_or_else(|| Error::Format(format!("blob {} out of bounds", e.name)))?;
            let (t, used) = format::decode::<T>(slice)?;
            if used != len {
                return Err(Error::Format(format!("blob {} has trailing bytes", e.name)));
            }
            tensors.push((e.name.clone(), t));
        }
        Ok(Checkpoint {
            architecture: header.architecture,
            tensors,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl<T: Real> MultiExitNetwork<T> {
    /// Parameters and running statistics, by name.
    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut tensors: Vec<(String, Tensor<T>)> = self
            .params()
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect();
        for rs in self.running_stats() {
            let n = rs.mean.len();
            tensors.push((
                format!("{}{RUNNING_MEAN}", rs.name),
                Tensor::new(vec![n], rs.mean.clone()).expect("stats shape"),
            ));
            tensors.push((
                format!("{}{RUNNING_VAR}", rs.name),
                Tensor::new(vec![n], rs.var.clone()).expect("stats shape"),
            ));
        }
        Checkpoint {
            architecture: self.architecture(),
            tensors,
            meta: serde_json::Value::Null,
        }
    }

    /// Rebuilds a network and overwrites every parameter and statistic from
    /// the checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        let mut net = Self::from_arch(&ckpt.architecture, 0)?;
        let ids: Vec<_> = net.params().ids().collect();
        for id in ids {
            let name = net.params().entry(id).name.clone();
            net.params_mut().set(id, ckpt.require(&name)?.clone())?;
        }
        for i in 0..net.running_stats().len() {
            let name = net.running_stats()[i].name.clone();
            let mean = ckpt.require(&format!("{name}{RUNNING_MEAN}"))?.data().to_vec();
            let var = ckpt.require(&format!("{name}{RUNNING_VAR}"))?.data().to_vec();
            let rs = &mut net.running_stats_mut()[i];
            if mean.len() != rs.mean.len() || var.len() != rs.var.len() {
                return Err(Error::shape(format!("running statistics of {name} have the wrong length")));
            }
            rs.mean = mean;
            rs.var = var;
        }
        Ok(net)
    }
}
