//! Stage-1 prediction masks and the false-negative error maps derived from them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::backbone::SemanticLogits;
use crate::dataio::{load_mask, save_mask};
use crate::error::{Error, Result};

/// Binary stage-1 prediction, `(H, W)` in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredictedMask {
    pub data: Array2<u8>,
}

/// Binary map of stage-1 false negatives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ErrorMap {
    pub data: Array2<u8>,
    /// 1 for full resolution, otherwise the pooling window used by
    /// [`align_error_map`].
    pub stride: usize,
}

impl ErrorMap {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn as_f64(&self) -> Array2<f64> {
        self.data.mapv(f64::from)
    }
}

/// Per-pixel argmax of two-class logits; ties go to background.
pub fn binarize(logits: &SemanticLogits) -> PredictedMask {
    let bg = logits.data.index_axis(Axis(0), 0);
    let fg = logits.data.index_axis(Axis(0), 1);
    let mut data = Array2::zeros(bg.dim());
    ndarray::Zip::from(&mut data)
        .and(&bg)
        .and(&fg)
        .for_each(|m, &b, &f| *m = u8::from(f > b));
    PredictedMask { data }
}

/// `Em(i,j) = 1` iff `gt(i,j) > m1(i,j)`.
pub fn generate_error_map(gt: &Array2<u8>, m1: &PredictedMask) -> Result<ErrorMap> {
    if gt.dim() != m1.data.dim() {
        let (a, b) = gt.dim();
        let (c, d) = m1.data.dim();
        return Err(Error::shape("error map inputs", &[a, b], &[c, d]));
    }
    let mut data = Array2::zeros(gt.dim());
    ndarray::Zip::from(&mut data)
        .and(gt)
        .and(&m1.data)
        .for_each(|e, &g, &m| *e = u8::from(g > m));
    Ok(ErrorMap { data, stride: 1 })
}

/// Max-pools a full-resolution error map with a `stride`×`stride` window so
/// that isolated misses survive downsampling.
pub fn align_error_map(em: &ErrorMap, stride: usize) -> Result<ErrorMap> {
    let (h, w) = em.data.dim();
    if stride == 0 || h % stride != 0 || w % stride != 0 {
        return Err(Error::InvalidArgument(format!(
            "error map {h}x{w} is not divisible by stride {stride}"
        )));
    }
    let mut out = Array2::zeros((h / stride, w / stride));
    for ((y, x), &v) in em.data.indexed_iter() {
        if v != 0 {
            out[[y / stride, x / stride]] = 1;
        }
    }
    Ok(ErrorMap {
        data: out,
        stride: em.stride * stride,
    })
}

/// On-disk index written next to the cached masks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheIndex {
    /// Hash of the checkpoint the masks were predicted with.
    pub checkpoint_hash: String,
    pub ids: Vec<String>,
}

/// Directory of `<id>_m1.png` / `<id>_em.png` files plus `index.json`.
#[derive(Clone, Debug)]
pub struct MaskCache {
    pub dir: PathBuf,
    suffix: &'static str,
}

impl MaskCache {
    pub fn masks(dir: impl Into<PathBuf>) -> Self {
        MaskCache {
            dir: dir.into(),
            suffix: "_m1",
        }
    }

    pub fn error_maps(dir: impl Into<PathBuf>) -> Self {
        MaskCache {
            dir: dir.into(),
            suffix: "_em",
        }
    }

    fn path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}{}.png", self.suffix))
    }

    fn index_path(&self) -> PathBuf {
        self.dir.join("index.json")
    }

    pub fn read_index(&self) -> Option<CacheIndex> {
        let text = fs::read_to_string(self.index_path()).ok()?;
        serde_json::from_str(&text).ok()
    }

    /// Loads all masks if the cache was written for `checkpoint_hash` and
    /// covers every id; `None` means the cache is stale or absent.
    pub fn load(&self, checkpoint_hash: &str, ids: &[String]) -> Result<Option<BTreeMap<String, Array2<u8>>>> {
        let Some(index) = self.read_index() else {
            return Ok(None);
        };
        if index.checkpoint_hash != checkpoint_hash || ids.iter().any(|id| !index.ids.contains(id)) {
            return Ok(None);
        }
        let mut out = BTreeMap::new();
        for id in ids {
            let p = self.path(id);
            if !p.is_file() {
                return Ok(None);
            }
            out.insert(id.clone(), load_mask(&p)?);
        }
        Ok(Some(out))
    }

    pub fn store(&self, checkpoint_hash: &str, masks: &BTreeMap<String, Array2<u8>>) -> Result<()> {
        fs::create_dir_all(&self.dir)?;
        for (id, m) in masks {
            save_mask(&self.path(id), m)?;
        }
        let index = CacheIndex {
            checkpoint_hash: checkpoint_hash.to_string(),
            ids: masks.keys().cloned().collect(),
        };
        fs::write(self.index_path(), serde_json::to_string_pretty(&index)?)?;
        Ok(())
    }

    pub fn exists(&self) -> bool {
        Path::new(&self.index_path()).is_file()
    }
}
