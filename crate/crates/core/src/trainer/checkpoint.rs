//! Versioned binary checkpoint.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic            8 bytes   "EARSEGCK"
//! version          u32       1
//! stage            u8        1 = baseline trunk, 2 = refined (trunk + attention)
//! epoch            u32       epochs completed in that stage
//! feature_channels u32
//! hash_len         u32
//! config_hash      hash_len bytes of UTF-8
//! count            u32       number of tensors
//! count × {
//!     name_len u32, name (UTF-8),
//!     ndim u32, dims u64 × ndim,
//!     data f64 × prod(dims)
//! }
//! ```
//!
//! Tensors are written in name order. Names are namespaced: `backbone.*`
//! and `eam.*` hold weights and batch-norm running statistics,
//! `momentum.<param name>` holds optimizer velocity.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use crate::backbone::{init_params, Backbone, BackboneConfig};
use crate::eam::Eam;
use crate::error::{Error, Result};
use crate::nn::{Module, Slot};

use super::Sgd;

pub const MAGIC: &[u8; 8] = b"EARSEGCK";
pub const VERSION: u32 = 1;
const MOMENTUM_PREFIX: &str = "momentum.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: u8,
    pub epoch: u32,
    pub feature_channels: u32,
    pub config_hash: String,
    pub tensors: BTreeMap<String, ArrayD<f64>>,
}

/// Trunk plus, after refinement, the error-attention module.
#[derive(Clone, Debug)]
pub struct SegModel {
    pub backbone: Backbone,
    pub eam: Option<Eam>,
}

impl Module for SegModel {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.backbone.visit(&crate::nn::join(prefix, "backbone"), f);
        if let Some(eam) = self.eam.as_mut() {
            eam.visit(&crate::nn::join(prefix, "eam"), f);
        }
    }
}

impl Checkpoint {
    pub fn from_model(
        model: &mut SegModel,
        optimizer: Option<&Sgd>,
        stage: u8,
        epoch: u32,
        config_hash: &str,
    ) -> Self {
        let mut tensors = BTreeMap::new();
        model.visit("", &mut |name, slot| {
            let t = match slot {
                Slot::Param(p) => p.value.clone(),
                Slot::Buffer(b) => b.clone(),
            };
            tensors.insert(name.to_string(), t);
        });
        if let Some(sgd) = optimizer {
            for (name, v) in &sgd.buffers {
                tensors.insert(format!("{MOMENTUM_PREFIX}{name}"), v.clone());
            }
        }
        Checkpoint {
            stage,
            epoch,
            feature_channels: model.backbone.feature_channels() as u32,
            config_hash: config_hash.to_string(),
            tensors,
        }
    }

    pub fn has_eam(&self) -> bool {
        self.tensors.keys().any(|k| k.starts_with("eam."))
    }

    /// Rebuilds the model; every model tensor must be present with a
    /// matching shape.
    pub fn to_model(&self) -> Result<SegModel> {
        let config = BackboneConfig {
            feature_channels: self.feature_channels as usize,
        };
        let mut model = SegModel {
            backbone: init_params(0, config)?,
            eam: self.has_eam().then(|| Eam::new(config.feature_channels, 0)),
        };
        let mut problem = None;
        let mut seen = 0usize;
        model.visit("", &mut |name, slot| {
            if problem.is_some() {
                return;
            }
            let target = match slot {
                Slot::Param(p) => &mut p.value,
                Slot::Buffer(b) => b,
            };
            match self.tensors.get(name) {
                Some(t) if t.shape() == target.shape() => {
                    target.assign(t);
                    seen += 1;
                }
                Some(t) => {
                    problem = Some(format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        t.shape(),
                        target.shape()
                    ))
                }
                None => problem = Some(format!("missing tensor {name}")),
            }
        });
        if let Some(p) = problem {
            return Err(Error::CheckpointParse(p));
        }
        let model_tensors = self
            .tensors
            .keys()
            .filter(|k| !k.starts_with(MOMENTUM_PREFIX))
            .count();
        if model_tensors != seen {
            return Err(Error::CheckpointParse(format!(
                "{} unexpected tensors",
                model_tensors - seen
            )));
        }
        Ok(model)
    }

    pub fn momentum(&self) -> Sgd {
        let mut sgd = Sgd::default();
        for (k, v) in &self.tensors {
            if let Some(name) = k.strip_prefix(MOMENTUM_PREFIX) {
                sgd.buffers.insert(name.to_string(), v.clone());
            }
        }
        sgd
    }

    /// Copy holding only weights and running statistics of `prefix.*`.
    pub fn tensors_with_prefix(&self, prefix: &str) -> BTreeMap<String, ArrayD<f64>> {
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.stage);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.feature_channels.to_le_bytes());
        out.extend_from_slice(&(self.config_hash.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_hash.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::CheckpointParse("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CheckpointParse(format!("unsupported version {version}")));
        }
        let stage = r.take(1)?[0];
        let epoch = r.u32()?;
        let feature_channels = r.u32()?;
        let config_hash = r.string()?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(Error::CheckpointParse(format!("tensor {name}: {ndim} dims")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::CheckpointParse("dimension overflow".into()))?);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::CheckpointParse("tensor size overflow".into()))?;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::CheckpointParse("tensor size overflow".into()))?)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = ArrayD::from_shape_vec(IxDyn(&shape), data)
                .map_err(|e| Error::CheckpointParse(e.to_string()))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::CheckpointParse(format!("duplicate tensor {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::CheckpointParse(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            stage,
            epoch,
            feature_channels,
            config_hash,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::PathNotFound(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }

    /// SHA-256 of the serialized form, hex encoded.
    pub fn content_hash(&self) -> String {
        Sha256::digest(self.to_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
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
            .ok_or_else(|| Error::CheckpointParse(format!("truncated at byte {}", self.pos)))?;
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

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::CheckpointParse("name is not UTF-8".into()))
    }
}
