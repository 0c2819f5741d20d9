//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"BDNS"  u32 version  u64 meta_len  meta_len bytes of JSON
//! u32 tensor_count
//! per tensor: u32 name_len, name (UTF-8), u32 ndim, ndim x u64 dims,
//!             prod(dims) x f32
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{NetSpec, ScoreNet};
use crate::optim::{AdamW, AdamWConfig};
use crate::schedule::{Parameterization, ScheduleSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BDNS";
pub const FORMAT_VERSION: u32 = 1;

const ADAM_FIRST: &str = "adam.m.";
const ADAM_SECOND: &str = "adam.v.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub net: NetSpec,
    pub schedule: ScheduleSpec,
    pub branches: usize,
    pub parameterization: Parameterization,
    /// Free-form record of how the weights were produced.
    #[serde(default)]
    pub provenance: serde_json::Value,
    /// Sampling step count a progressively distilled student was trained for.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trained_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerMeta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerMeta {
    pub config: AdamWConfig,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_net(net: &ScoreNet, schedule: &ScheduleSpec, provenance: serde_json::Value) -> Self {
        let spec = net.spec().clone();
        Self {
            meta: CheckpointMeta {
                branches: spec.branches,
                parameterization: spec.parameterization,
                net: spec,
                schedule: *schedule,
                provenance,
                trained_steps: None,
                optimizer: None,
            },
            tensors: net
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (n, t.detach()))
                .collect(),
        }
    }

    /// Stores the optimizer moments next to the parameters they belong to.
    pub fn with_optimizer(mut self, opt: &AdamW) -> Result<Self> {
        let (step, first, second) = opt.state();
        let names: Vec<(String, Vec<usize>)> = self
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        if !first.is_empty() {
            if first.len() != names.len() {
                return Err(Error::contract("optimizer state does not match the parameters"));
            }
            for (prefix, bufs) in [(ADAM_FIRST, first), (ADAM_SECOND, second)] {
                for ((name, shape), buf) in names.iter().zip(bufs) {
                    self.tensors
                        .push((format!("{prefix}{name}"), Tensor::new(shape.clone(), buf.clone())?));
                }
            }
        }
        self.meta.optimizer = Some(OptimizerMeta {
            config: opt.config,
            step,
        });
        Ok(self)
    }

    pub fn net(&self) -> Result<ScoreNet> {
        if self.meta.net.branches != self.meta.branches
            || self.meta.net.parameterization != self.meta.parameterization
        {
            return Err(Error::Format("metadata disagrees with the network spec".into()));
        }
        let params = self
            .tensors
            .iter()
            .filter(|(n, _)| n.starts_with("layers."))
            .cloned()
            .collect();
        ScoreNet::from_tensors(self.meta.net.clone(), params)
    }

    pub fn optimizer(&self) -> Result<Option<AdamW>> {
        let Some(meta) = &self.meta.optimizer else {
            return Ok(None);
        };
        let collect = |prefix: &str| -> Vec<Vec<f32>> {
            self.tensors
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(_, t)| t.data().to_vec())
                .collect()
        };
        AdamW::from_state(meta.config, meta.step, collect(ADAM_FIRST), collect(ADAM_SECOND)).map(Some)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(4 * t.len());
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected {MAGIC:?}")));
        }
        let version = read_u32(&mut r, "version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "format version {version} is not supported (this build reads version {FORMAT_VERSION})"
            )));
        }
        let meta_len = read_len(read_u64(&mut r, "metadata length")?, "metadata")?;
        let meta_bytes = read_vec(&mut r, meta_len, "metadata")?;
        let meta: CheckpointMeta =
            serde_json::from_slice(&meta_bytes).map_err(|e| Error::Format(format!("metadata: {e}")))?;
        let count = read_u32(&mut r, "tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for i in 0..count {
            let name_len = read_u32(&mut r, "name length")? as usize;
            let name = String::from_utf8(read_vec(&mut r, name_len, "tensor name")?)
                .map_err(|_| Error::Format(format!("tensor {i} name is not UTF-8")))?;
            let ndim = read_u32(&mut r, "ndim")? as usize;
            if ndim == 0 || ndim > 8 {
                return Err(Error::Format(format!("tensor `{name}` has {ndim} dimensions")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_len(read_u64(&mut r, "dimension")?, "dimension")?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?;
            let raw = read_vec(&mut r, numel, "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after the last tensor".into()));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(f))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn read_len(v: u64, what: &str) -> Result<usize> {
    usize::try_from(v).map_err(|_| Error::Format(format!("{what} length {v} does not fit in memory")))
}

/// Reads `len` bytes without trusting `len` for the up-front allocation.
fn read_vec<R: Read>(r: &mut R, len: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(len.min(1 << 20));
    let got = r.by_ref().take(len as u64).read_to_end(&mut buf)?;
    if got != len {
        return Err(Error::Format(format!("truncated while reading {what}")));
    }
    Ok(buf)
}
