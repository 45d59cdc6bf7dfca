//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "ZSTTCKPT"
//! version    u32       CHECKPOINT_VERSION
//! meta_len   u32       byte length of the metadata text
//! meta       UTF-8     TOML document (model config, training state)
//! count      u32       number of tensors
//! per tensor:
//!   name_len u32, name UTF-8
//!   ndim     u32, dims u32 * ndim
//!   data     f32 * prod(dims)
//! digest     32 bytes  SHA-256 of every preceding byte
//! ```
//!
//! Optimizer moments are stored as ordinary tensors named
//! `adam.m/<param>` and `adam.v/<param>`; the step count lives in the metadata.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::optim::{AdamConfig, OptimizerState};
use super::tensor::{HasParams, Real};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ZSTTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const FIRST_MOMENT: &str = "adam.m/";
const SECOND_MOMENT: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub tensors: Vec<NamedTensor>,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| ckpt_err("unexpected end of checkpoint data"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| ckpt_err("invalid UTF-8 string"))
    }
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_MAGIC.len() + 32 {
            return Err(ckpt_err("file too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(ckpt_err("digest mismatch (corrupted or truncated file)"));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(ckpt_err("bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(ckpt_err(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let metadata = r.string()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| ckpt_err("tensor too large"))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(ckpt_err("trailing bytes after last tensor"));
        }
        Ok(Self { metadata, tensors })
    }

    /// Writes through a temporary file and renames, so a crash never leaves a
    /// half-written checkpoint under `path`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn push_params<T: Real>(&mut self, params: &impl HasParams<T>) {
        params.visit(&mut |p| {
            self.tensors.push(NamedTensor {
                name: p.name().to_string(),
                shape: p.shape().to_vec(),
                data: p.value.iter().map(|v| v.as_f32()).collect(),
            })
        });
    }

    pub fn push_optimizer<T: Real>(&mut self, state: &OptimizerState<T>) {
        for (name, m, v) in state.moments() {
            for (prefix, data) in [(FIRST_MOMENT, m), (SECOND_MOMENT, v)] {
                self.tensors.push(NamedTensor {
                    name: format!("{prefix}{name}"),
                    shape: vec![data.len()],
                    data: data.iter().map(|x| x.as_f32()).collect(),
                });
            }
        }
    }

    /// Copies stored values into `params`; nothing is modified unless every
    /// parameter is present with a matching shape.
    pub fn load_params<T: Real>(&self, params: &mut impl HasParams<T>) -> Result<()> {
        let mut problems = Vec::new();
        params.visit(&mut |p| match self.tensor(p.name()) {
            Some(t) if t.shape == p.shape() => {}
            Some(t) => problems.push(format!(
                "`{}` has shape {:?}, expected {:?}",
                p.name(),
                t.shape,
                p.shape()
            )),
            None => problems.push(format!("missing tensor `{}`", p.name())),
        });
        if !problems.is_empty() {
            return Err(ckpt_err(problems.join("; ")));
        }
        params.visit_mut(&mut |p| {
            let t = self.tensor(p.name()).expect("checked above");
            for (v, &x) in p.value.iter_mut().zip(&t.data) {
                *v = T::of_f32(x);
            }
        });
        Ok(())
    }

    pub fn load_optimizer<T: Real>(
        &self,
        params: &impl HasParams<T>,
        config: AdamConfig,
        step: u64,
    ) -> Result<OptimizerState<T>> {
        let mut names = Vec::new();
        params.visit(&mut |p| names.push((p.name().to_string(), p.len())));
        let mut first = Vec::with_capacity(names.len());
        let mut second = Vec::with_capacity(names.len());
        for (name, len) in &names {
            for (prefix, dest) in [(FIRST_MOMENT, &mut first), (SECOND_MOMENT, &mut second)] {
                let key = format!("{prefix}{name}");
                let t = self
                    .tensor(&key)
                    .ok_or_else(|| ckpt_err(format!("missing optimizer tensor `{key}`")))?;
                if t.data.len() != *len {
                    return Err(ckpt_err(format!(
                        "optimizer tensor `{key}` has wrong length"
                    )));
                }
                dest.push(t.data.iter().map(|&x| T::of_f32(x)).collect::<Vec<T>>());
            }
        }
        OptimizerState::from_parts(
            config,
            step,
            names.into_iter().map(|(n, _)| n).collect(),
            first,
            second,
        )
    }
}
