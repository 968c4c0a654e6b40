//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "SRFCKPT\0"
//! version  u32
//! count    u32      number of tensor records
//! record   name_len u32, name bytes (UTF-8), rank u32, rank × u64 dims,
//!          product(dims) × f64 values
//! ```
//!
//! Record names are prefixed `param/`, `buffer/`, `adam.m/` or `adam.v/`;
//! `meta/step` and `meta/epoch` are rank-0 records.

use std::fs;
use std::path::Path;

use super::adam::{Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::model::{ParamKind, SrfModel};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SRFCKPT\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Snapshot of a model, its optimizer and the completed epoch count.
    pub fn capture(model: &SrfModel, adam: &Adam, epoch: usize) -> Self {
        let mut tensors = Vec::new();
        for e in model.params().entries() {
            let prefix = match e.kind {
                ParamKind::Trainable => "param",
                ParamKind::Buffer => "buffer",
            };
            tensors.push((format!("{prefix}/{}", e.name), e.value.clone()));
        }
        for (id, e) in model.params().trainable() {
            tensors.push((format!("adam.m/{}", e.name), adam.m[id].clone()));
            tensors.push((format!("adam.v/{}", e.name), adam.v[id].clone()));
        }
        tensors.push(("meta/step".into(), Tensor::scalar(adam.step as f64)));
        tensors.push(("meta/epoch".into(), Tensor::scalar(epoch as f64)));
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn meta(&self, name: &str) -> Result<u64> {
        let v = self
            .get(name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("missing {name}")))?
            .item();
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::CheckpointMismatch(format!("{name} = {v}")));
        }
        Ok(v as u64)
    }

    pub fn step(&self) -> Result<u64> {
        self.meta("meta/step")
    }

    pub fn epoch(&self) -> Result<usize> {
        Ok(self.meta("meta/epoch")? as usize)
    }

    /// Copies parameters and buffers into `model` and rebuilds the optimizer
    /// state. Every model tensor must be present with its exact shape.
    pub fn restore(&self, model: &mut SrfModel, adam_config: AdamConfig) -> Result<(Adam, usize)> {
        let mut adam = Adam::new(adam_config, model.params());
        let names: Vec<(usize, String, ParamKind)> = model
            .params()
            .entries()
            .iter()
            .enumerate()
            .map(|(i, e)| (i, e.name.clone(), e.kind))
            .collect();
        let fetch = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = self
                .get(name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing {name}")))?;
            if t.shape() != shape {
                return Err(Error::CheckpointMismatch(format!(
                    "{name}: shape {:?}, model expects {shape:?}",
                    t.shape()
                )));
            }
            Ok(t.clone())
        };
        let expected = names.len()
            + 2 * names.iter().filter(|(_, _, k)| *k == ParamKind::Trainable).count()
            + 2;
        if self.tensors.len() != expected {
            return Err(Error::CheckpointMismatch(format!(
                "{} records, model expects {expected}",
                self.tensors.len()
            )));
        }
        for (id, name, kind) in names {
            let shape = model.params().get(id).shape().to_vec();
            let prefix = if kind == ParamKind::Trainable { "param" } else { "buffer" };
            *model.params_mut().get_mut(id) = fetch(&format!("{prefix}/{name}"), &shape)?;
            if kind == ParamKind::Trainable {
                adam.m[id] = fetch(&format!("adam.m/{name}"), &shape)?;
                adam.v[id] = fetch(&format!("adam.v/{name}"), &shape)?;
            }
        }
        adam.step = self.step()?;
        Ok((adam, self.epoch()?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| Error::format("checkpoint", e.to_string()))?
                .to_owned();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::format("checkpoint", "tensor too large"))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::format("checkpoint", "tensor too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("checkpoint", "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Element-wise mean of parameters and buffers; optimizer moments and
/// counters come from the last checkpoint.
///
/// The mean is accumulated incrementally, which keeps identical inputs
/// exactly unchanged.
pub fn average_checkpoints(checkpoints: &[Checkpoint]) -> Result<Checkpoint> {
    let last = checkpoints
        .last()
        .ok_or_else(|| Error::CheckpointMismatch("no checkpoints to average".into()))?;
    let mut out = last.clone();
    for (name, t) in &mut out.tensors {
        let averaged = name.starts_with("param/") || name.starts_with("buffer/");
        let mut mean = checkpoints[0]
            .get(name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("missing {name}")))?
            .clone();
        for (k, c) in checkpoints.iter().enumerate() {
            let other = c
                .get(name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing {name}")))?;
            if other.shape() != t.shape() || c.tensors.len() != last.tensors.len() {
                return Err(Error::CheckpointMismatch(format!("{name}: architectures differ")));
            }
            if averaged && k > 0 {
                let n = (k + 1) as f64;
                for (m, &x) in mean.data_mut().iter_mut().zip(other.data()) {
                    *m += (x - *m) / n;
                }
            }
        }
        if averaged {
            *t = mean;
        }
    }
    Ok(out)
}
