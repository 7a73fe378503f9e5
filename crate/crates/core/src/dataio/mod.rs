//! Dataset loading, k-fold splitting, augmentation and synthetic data.

mod augment;
mod folds;
mod load;
mod synth;

pub use augment::{augment, augment_with_masks, AugmentPlan, NOISE_SIGMA};
pub use folds::{make_folds, Fold};
pub use load::{load_dataset, load_mask, save_generic, save_mask, Layout};
pub use synth::{synth_vessels, FOREGROUND_RANGE};

use std::path::PathBuf;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One image with its binary vessel annotation.
///
/// `image` is stored channel-first as `(3, H, W)` with values in `[0, 1]`;
/// `gt` and `fov` are `(H, W)` with values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct RetinalSample {
    pub id: String,
    pub image: Array3<f64>,
    pub gt: Array2<u8>,
    pub fov: Option<Array2<u8>>,
}

impl RetinalSample {
    pub fn new(
        id: impl Into<String>,
        image: Array3<f64>,
        gt: Array2<u8>,
        fov: Option<Array2<u8>>,
    ) -> Result<Self> {
        let sample = RetinalSample {
            id: id.into(),
            image,
            gt,
            fov,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.image.dim();
        if c != 3 {
            return Err(Error::shape("sample image channels", &[3], &[c]));
        }
        if self.gt.dim() != (h, w) {
            let (gh, gw) = self.gt.dim();
            return Err(Error::shape("sample ground truth", &[h, w], &[gh, gw]));
        }
        if let Some(fov) = &self.fov {
            if fov.dim() != (h, w) {
                let (fh, fw) = fov.dim();
                return Err(Error::shape("sample field of view", &[h, w], &[fh, fw]));
            }
            if fov.iter().any(|&v| v > 1) {
                return Err(Error::InvalidArgument(format!("{}: fov is not binary", self.id)));
            }
        }
        if self.gt.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument(format!("{}: gt is not binary", self.id)));
        }
        if self.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!(
                "{}: image values outside [0, 1]",
                self.id
            )));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.gt.nrows()
    }

    pub fn width(&self) -> usize {
        self.gt.ncols()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.gt.iter().filter(|&&v| v == 1).count() as f64 / self.gt.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Fold(usize),
}

/// Sorted, duplicate-free listing of the samples that make up a split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    ids: Vec<String>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, split: Split, mut ids: Vec<String>) -> Result<Self> {
        ids.sort();
        if let Some(pair) = ids.windows(2).find(|p| p[0] == p[1]) {
            return Err(Error::InvalidArgument(format!("duplicate sample id {}", pair[0])));
        }
        Ok(DatasetManifest {
            root: root.into(),
            split,
            ids,
        })
    }

    pub fn from_samples(root: impl Into<PathBuf>, split: Split, samples: &[RetinalSample]) -> Result<Self> {
        Self::new(root, split, samples.iter().map(|s| s.id.clone()).collect())
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_gt() {
        let err = RetinalSample::new("a", Array3::zeros((3, 4, 4)), Array2::zeros((4, 5)), None);
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn rejects_non_binary_gt() {
        let mut gt = Array2::zeros((4, 4));
        gt[[0, 0]] = 255;
        assert!(RetinalSample::new("a", Array3::zeros((3, 4, 4)), gt, None).is_err());
    }

    #[test]
    fn manifest_sorts_and_rejects_duplicates() {
        let m = DatasetManifest::new("/x", Split::Train, vec!["b".into(), "a".into()]).unwrap();
        assert_eq!(m.ids(), &["a".to_string(), "b".to_string()]);
        assert!(DatasetManifest::new("/x", Split::Test, vec!["a".into(), "a".into()]).is_err());
    }
}
