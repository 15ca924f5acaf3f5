//! Little-endian tensor container used for checkpoints and tensor archives.
//!
//! Layout: magic `PIRT`, `u32` version (1), then three sections (parameters,
//! running statistics, flags). Each section is a `u32` entry count followed by
//! entries of `u16` name length, UTF-8 name, `u8` rank, `u32` dims, and raw
//! `f32` data. Running statistics are stored as `<layer>/running_mean` and
//! `<layer>/running_var`; trainable flags as rank-0 tensors holding 1.0 or 0.0.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use pirtune_autodiff::{RunningStats, Tensor};
use thiserror::Error;

use crate::nets::{NetworkSpec, NetworkState};

pub const MAGIC: &[u8; 4] = b"PIRT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unrecognised container: bad magic {0:?} (expected \"PIRT\" version 1)")]
    BadMagic([u8; 4]),

    #[error("unsupported container version {0} (expected 1)")]
    UnsupportedVersion(u32),

    #[error("container truncated while reading {0}")]
    Truncated(&'static str),

    #[error("malformed container: {0}")]
    Malformed(String),

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("container has no tensor `{0}`")]
    Missing(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// The three named-tensor sections of a container file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub stats: Vec<(String, Tensor<f32>)>,
    pub flags: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn with_tensors(tensors: Vec<(String, Tensor<f32>)>) -> Self {
        Self {
            tensors,
            ..Self::default()
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for section in [&self.tensors, &self.stats, &self.flags] {
            out.extend_from_slice(&(section.len() as u32).to_le_bytes());
            for (name, t) in section {
                encode_entry(&mut out, name, t)?;
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("four bytes");
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let mut sections = Vec::with_capacity(3);
        for _ in 0..3 {
            let count = r.u32("entry count")? as usize;
            let mut entries = Vec::with_capacity(count.min(4096));
            for _ in 0..count {
                entries.push(decode_entry(&mut r)?);
            }
            sections.push(entries);
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let flags = sections.pop().expect("three sections");
        let stats = sections.pop().expect("three sections");
        let tensors = sections.pop().expect("three sections");
        Ok(Self {
            tensors,
            stats,
            flags,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        fs::write(path, bytes).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::decode(&bytes)
    }
}

fn encode_entry(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> Result<()> {
    let name_len = u16::try_from(name.len())
        .map_err(|_| CheckpointError::Malformed(format!("name `{name}` too long")))?;
    let rank = u8::try_from(t.rank())
        .map_err(|_| CheckpointError::Malformed(format!("rank of `{name}` too large")))?;
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d)
            .map_err(|_| CheckpointError::Malformed(format!("dimension of `{name}` too large")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated(what))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("four bytes")))
    }
}

fn decode_entry(r: &mut Reader<'_>) -> Result<(String, Tensor<f32>)> {
    let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("two bytes"));
    let name = std::str::from_utf8(r.take(len as usize, "name")?)
        .map_err(|e| CheckpointError::Malformed(format!("tensor name is not UTF-8: {e}")))?
        .to_string();
    let rank = r.take(1, "rank")?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32("dimension")? as usize);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| CheckpointError::Malformed(format!("`{name}` is too large")))?;
    let raw = r.take(
        count
            .checked_mul(4)
            .ok_or(CheckpointError::Truncated("tensor data"))?,
        "tensor data",
    )?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
        .collect();
    let tensor = Tensor::new(shape, data)
        .map_err(|e| CheckpointError::Malformed(format!("tensor `{name}`: {e}")))?;
    Ok((name, tensor))
}

impl From<&NetworkState> for Container {
    fn from(state: &NetworkState) -> Self {
        let tensors = state
            .params
            .iter()
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        let mut stats = Vec::new();
        for (name, s) in &state.stats {
            let c = s.mean.len();
            stats.push((
                format!("{name}/running_mean"),
                Tensor::new(vec![c], s.mean.clone()).expect("running stats are non-empty"),
            ));
            stats.push((
                format!("{name}/running_var"),
                Tensor::new(vec![c], s.var.clone()).expect("running stats are non-empty"),
            ));
        }
        let flags = state
            .params
            .keys()
            .map(|n| {
                let v = if state.is_trainable(n) { 1.0 } else { 0.0 };
                (n.clone(), Tensor::scalar(v))
            })
            .collect();
        Self {
            tensors,
            stats,
            flags,
        }
    }
}

impl TryFrom<Container> for NetworkState {
    type Error = CheckpointError;

    fn try_from(c: Container) -> Result<Self> {
        let mut state = NetworkState {
            params: c.tensors.into_iter().collect(),
            ..NetworkState::default()
        };
        let mut means = BTreeMap::new();
        let mut vars = BTreeMap::new();
        for (name, t) in c.stats {
            if let Some(layer) = name.strip_suffix("/running_mean") {
                means.insert(layer.to_string(), t.into_data());
            } else if let Some(layer) = name.strip_suffix("/running_var") {
                vars.insert(layer.to_string(), t.into_data());
            } else {
                return Err(CheckpointError::Malformed(format!(
                    "unexpected statistics entry `{name}`"
                )));
            }
        }
        for (layer, mean) in means {
            let var = vars
                .remove(&layer)
                .ok_or_else(|| CheckpointError::Missing(format!("{layer}/running_var")))?;
            state.stats.insert(layer, RunningStats { mean, var });
        }
        if let Some(layer) = vars.keys().next() {
            return Err(CheckpointError::Missing(format!("{layer}/running_mean")));
        }
        for (name, t) in c.flags {
            let v = t.item().map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            state.trainable.insert(name, v != 0.0);
        }
        Ok(state)
    }
}

pub fn save_checkpoint(state: &NetworkState, path: &Path) -> Result<()> {
    Container::from(state).write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkState> {
    NetworkState::try_from(Container::read(path)?)
}

/// Loads a checkpoint and checks every tensor against `spec`.
pub fn load_checkpoint_for(path: &Path, spec: &NetworkSpec) -> Result<NetworkState> {
    let state = load_checkpoint(path)?;
    let layout = spec.layout();
    for (name, shape) in &layout.params {
        let t = state
            .params
            .get(name)
            .ok_or_else(|| CheckpointError::Missing(name.clone()))?;
        if t.shape() != shape.as_slice() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                expected: shape.clone(),
                found: t.shape().to_vec(),
            });
        }
    }
    if let Some(extra) = state
        .params
        .keys()
        .find(|k| !layout.params.iter().any(|(n, _)| n == *k))
    {
        return Err(CheckpointError::Malformed(format!(
            "unexpected tensor `{extra}` for network `{}`",
            spec.name
        )));
    }
    for (name, channels) in &layout.running_stats {
        let s = state
            .stats
            .get(name)
            .ok_or_else(|| CheckpointError::Missing(format!("{name}/running_mean")))?;
        if s.mean.len() != *channels || s.var.len() != *channels {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                expected: vec![*channels],
                found: vec![s.mean.len()],
            });
        }
    }
    Ok(state)
}
