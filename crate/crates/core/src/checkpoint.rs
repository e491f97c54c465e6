//! Versioned binary checkpoints.
//!
//! Layout (little-endian): `"CRXX"`, `u32` version, 32-byte config digest,
//! `u32` epoch, `u64` step, `u32` tensor count, then per tensor a `u32`
//! name length, the UTF-8 name, `u32` rank, `u32` extents and `f32` data.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::CrossXModel;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CRXX";
pub const VERSION: u32 = 1;
/// Prefix of optimizer buffers stored next to the parameters.
pub const MOMENTUM_PREFIX: &str = "momentum.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub epoch: u32,
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Snapshot of a model plus optional momentum buffers keyed by
    /// parameter name.
    pub fn capture(
        model: &CrossXModel,
        momentum: Option<&[(String, Tensor)]>,
        digest: [u8; 32],
        epoch: u32,
        step: u64,
    ) -> Self {
        let mut tensors = Vec::new();
        model.visit(&mut |name, t, _| tensors.push((name.to_string(), t.clone())));
        if let Some(m) = momentum {
            for (name, t) in m {
                tensors.push((format!("{MOMENTUM_PREFIX}{name}"), t.clone()));
            }
        }
        Checkpoint { digest, epoch, step, tensors }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut digest = [0u8; 32];
        read_exact(&mut r, &mut digest)?;
        let epoch = read_u32(&mut r)?;
        let mut step = [0u8; 8];
        read_exact(&mut r, &mut step)?;
        let step = u64::from_le_bytes(step);
        let count = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            if numel.saturating_mul(4) > r.len() {
                return Err(Error::Format(format!("truncated data for tensor {name}")));
            }
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let mut b = [0u8; 4];
                read_exact(&mut r, &mut b)?;
                data.push(f32::from_le_bytes(b) as f64);
            }
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", r.len())));
        }
        Ok(Checkpoint { digest, epoch, step, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Copy stored tensors into `model`, which must have been built from a
    /// config with the same branch layout. Returns the momentum buffers.
    pub fn restore(&self, model: &mut CrossXModel) -> Result<Vec<(String, Tensor)>> {
        let stored: HashMap<&str, &Tensor> = self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut err = None;
        let mut used = 0;
        model.visit_mut(&mut |name, t, _| {
            if err.is_some() {
                return;
            }
            match stored.get(name) {
                Some(s) if s.shape() == t.shape() => {
                    *t = (*s).clone();
                    used += 1;
                }
                Some(s) => {
                    err = Some(Error::Format(format!("{name}: stored shape {:?}, model {:?}", s.shape(), t.shape())))
                }
                None => err = Some(Error::Format(format!("checkpoint has no tensor {name}"))),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        let momentum: Vec<(String, Tensor)> = self
            .tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(MOMENTUM_PREFIX).map(|n| (n.to_string(), t.clone())))
            .collect();
        if used + momentum.len() != self.tensors.len() {
            return Err(Error::Format("checkpoint holds tensors the model does not know".into()));
        }
        Ok(momentum)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Format("truncated checkpoint".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
