use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::RetinalSample;
use crate::error::{Error, Result};

/// Directory conventions understood by [`load_dataset`].
///
/// * `drive`: `images/`, `1st_manual/`, `mask/` (FOV), matched by numeric id prefix.
/// * `stare`: `images/`, `labels/`, optional `mask/`, matched by the name before the first dot.
/// * `generic`: `images/`, `gt/`, optional `fov/`, matched by file stem.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Drive,
    Stare,
    #[default]
    Generic,
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "drive" => Ok(Layout::Drive),
            "stare" => Ok(Layout::Stare),
            "generic" => Ok(Layout::Generic),
            other => Err(Error::InvalidArgument(format!("unknown layout {other:?}"))),
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layout::Drive => "drive",
            Layout::Stare => "stare",
            Layout::Generic => "generic",
        })
    }
}

struct Dirs {
    images: (&'static str, &'static [&'static str]),
    gt: (&'static str, &'static [&'static str]),
    fov: Option<(&'static str, &'static [&'static str])>,
    fov_required: bool,
    key: fn(&Path) -> String,
}

fn drive_key(p: &Path) -> String {
    let name = p.file_name().and_then(|s| s.to_str()).unwrap_or_default();
    let digits: String = name.chars().take_while(char::is_ascii_digit).collect();
    if digits.is_empty() {
        stem(p)
    } else {
        digits
    }
}

fn first_dot_key(p: &Path) -> String {
    let name = p.file_name().and_then(|s| s.to_str()).unwrap_or_default();
    name.split('.').next().unwrap_or_default().to_string()
}

fn stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

impl Layout {
    fn dirs(self) -> Dirs {
        match self {
            Layout::Drive => Dirs {
                images: ("images", &["png", "tif", "tiff"]),
                gt: ("1st_manual", &["png", "gif"]),
                fov: Some(("mask", &["png", "gif"])),
                fov_required: true,
                key: drive_key,
            },
            Layout::Stare => Dirs {
                images: ("images", &["png", "ppm"]),
                gt: ("labels", &["png"]),
                fov: Some(("mask", &["png", "gif", "ppm"])),
                fov_required: false,
                key: first_dot_key,
            },
            Layout::Generic => Dirs {
                images: ("images", &["png", "tif", "tiff", "gif", "ppm", "jpg", "jpeg"]),
                gt: ("gt", &["png", "tif", "tiff", "gif", "ppm"]),
                fov: Some(("fov", &["png", "gif"])),
                fov_required: false,
                key: stem,
            },
        }
    }
}

fn list(dir: &Path, exts: &[&str], key: fn(&Path) -> String) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let ok = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| exts.iter().any(|x| x.eq_ignore_ascii_case(e)));
        if ok && path.is_file() {
            out.insert(key(&path), path);
        }
    }
    Ok(out)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn load_rgb(path: &Path) -> Result<Array3<f64>> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        f64::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
    }))
}

/// Reads a single-channel mask and binarizes it at half its maximum value.
pub fn load_mask(path: &Path) -> Result<Array2<u8>> {
    let img = open(path)?.to_luma16();
    let (w, h) = img.dimensions();
    let max = img.pixels().map(|p| p[0]).max().unwrap_or(0);
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        let v = img.get_pixel(x as u32, y as u32)[0];
        u8::from(max > 0 && 2 * u32::from(v) >= u32::from(max))
    }))
}

/// Writes a binary mask as an 8-bit PNG with values 0 / 255.
pub fn save_mask(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[[y as usize, x as usize]] > 0 { 255 } else { 0 }])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn save_rgb(path: &Path, image: &Array3<f64>) -> Result<()> {
    let (_, h, w) = image.dim();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (image[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads every image/annotation pair under `root`, sorted by id.
pub fn load_dataset(root: &Path, layout: Layout) -> Result<Vec<RetinalSample>> {
    if !root.is_dir() {
        return Err(Error::PathNotFound(root.to_path_buf()));
    }
    let dirs = layout.dirs();
    let image_dir = root.join(dirs.images.0);
    let gt_dir = root.join(dirs.gt.0);
    if !image_dir.is_dir() || !gt_dir.is_dir() {
        return Err(Error::NoSamples(root.to_path_buf()));
    }
    let images = list(&image_dir, dirs.images.1, dirs.key)?;
    let gts = list(&gt_dir, dirs.gt.1, dirs.key)?;
    let fovs = match dirs.fov {
        Some((sub, exts)) if root.join(sub).is_dir() => Some(list(&root.join(sub), exts, dirs.key)?),
        Some((sub, _)) if dirs.fov_required => return Err(Error::PathNotFound(root.join(sub))),
        _ => None,
    };
    if images.is_empty() {
        return Err(Error::NoSamples(root.to_path_buf()));
    }
    if let Some(id) = gts.keys().find(|k| !images.contains_key(*k)) {
        return Err(Error::MissingPair {
            id: id.clone(),
            what: "image",
        });
    }

    let mut samples = Vec::with_capacity(images.len());
    for (id, image_path) in &images {
        let gt_path = gts.get(id).ok_or_else(|| Error::MissingPair {
            id: id.clone(),
            what: "ground-truth mask",
        })?;
        let fov = match &fovs {
            Some(map) => match map.get(id) {
                Some(p) => Some(load_mask(p)?),
                None if dirs.fov_required => {
                    return Err(Error::MissingPair {
                        id: id.clone(),
                        what: "field-of-view mask",
                    })
                }
                None => None,
            },
            None => None,
        };
        let sample = RetinalSample::new(id.clone(), load_rgb(image_path)?, load_mask(gt_path)?, fov)?;
        samples.push(sample);
    }
    log::debug!("loaded {} samples from {}", samples.len(), root.display());
    Ok(samples)
}

/// Writes samples in the generic layout (`images/`, `gt/`, `fov/`).
pub fn save_generic(root: &Path, samples: &[RetinalSample]) -> Result<()> {
    fs::create_dir_all(root.join("images"))?;
    fs::create_dir_all(root.join("gt"))?;
    for s in samples {
        save_rgb(&root.join("images").join(format!("{}.png", s.id)), &s.image)?;
        save_mask(&root.join("gt").join(format!("{}.png", s.id)), &s.gt)?;
        if let Some(fov) = &s.fov {
            fs::create_dir_all(root.join("fov"))?;
            save_mask(&root.join("fov").join(format!("{}.png", s.id)), fov)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drive_key_takes_numeric_prefix() {
        assert_eq!(drive_key(Path::new("21_training.tif")), "21");
        assert_eq!(drive_key(Path::new("21_manual1.gif")), "21");
        assert_eq!(drive_key(Path::new("21_training_mask.gif")), "21");
    }

    #[test]
    fn stare_key_strips_all_suffixes() {
        assert_eq!(first_dot_key(Path::new("im0001.ah.png")), "im0001");
        assert_eq!(first_dot_key(Path::new("im0001.ppm")), "im0001");
    }

    #[test]
    fn layout_parses() {
        assert_eq!("DRIVE".parse::<Layout>().unwrap(), Layout::Drive);
        assert!("foo".parse::<Layout>().is_err());
    }
}
