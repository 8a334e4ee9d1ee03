//! Datasets on disk: a JSON manifest listing the category registry and
//! image/mask pairs, lossless 8-bit RGB images and single-channel index masks.
//!
//! ```json
//! {
//!   "version": 1,
//!   "dataset_id": "synth",
//!   "categories": ["background", "red bar", "green rectangle"],
//!   "ignore_index": 255,
//!   "samples": [
//!     {"image": "images/0000.png", "mask": "masks/0000.png", "split": "train"}
//!   ]
//! }
//! ```
//!
//! Paths are relative to the manifest's directory.

mod registry;
pub mod synth;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use registry::CategoryRegistry;

use crate::error::{Error, Result};
use crate::grid::{nearest_resize, ImageGrid, LabelMask, IGNORE_INDEX};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(Error::config(format!("unknown split {s:?}, expected train or val"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

/// Manifest as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub dataset_id: String,
    pub categories: Vec<String>,
    #[serde(default = "default_ignore")]
    pub ignore_index: u8,
    pub samples: Vec<ManifestSample>,
}

fn default_ignore() -> u8 {
    IGNORE_INDEX
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSample {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
}

/// A sample with resolved paths.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub registry: CategoryRegistry,
    pub ignore_index: u8,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }
}

/// Reads and validates a manifest. Mask values are checked when each mask
/// is loaded.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::config(format!(
            "unsupported manifest version {} in {}",
            manifest.version,
            path.display()
        )));
    }
    let registry = CategoryRegistry::new(manifest.dataset_id, manifest.categories)?;
    if registry.len() > usize::from(manifest.ignore_index) {
        return Err(Error::config(format!(
            "{} categories collide with ignore index {}",
            registry.len(),
            manifest.ignore_index
        )));
    }
    if manifest.samples.is_empty() {
        return Err(Error::config(format!("manifest {} lists no samples", path.display())));
    }
    let root = path.parent().unwrap_or(Path::new("."));
    let samples = manifest
        .samples
        .into_iter()
        .map(|s| {
            let image = root.join(&s.image);
            let mask = root.join(&s.mask);
            for p in [&image, &mask] {
                if !p.is_file() {
                    return Err(Error::config(format!("missing file {}", p.display())));
                }
            }
            let id = s
                .image
                .file_stem()
                .map(|x| x.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok(Sample {
                id,
                image,
                mask,
                split: s.split,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        registry,
        ignore_index: manifest.ignore_index,
        samples,
    })
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serialises");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn decode_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn read_image(path: &Path) -> Result<ImageGrid> {
    let img = image::open(path).map_err(|e| decode_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect();
    ImageGrid::from_rgb(h as usize, w as usize, data)
}

pub fn read_mask(path: &Path) -> Result<LabelMask> {
    let img = image::open(path).map_err(|e| decode_err(path, e))?;
    if img.color().channel_count() != 1 {
        return Err(decode_err(path, "index masks must be single-channel"));
    }
    let img = img.to_luma8();
    let (w, h) = img.dimensions();
    LabelMask::new(h as usize, w as usize, 1, img.into_raw())
}

pub fn write_image(path: &Path, image: &ImageGrid) -> Result<()> {
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::RgbImage::from_raw(image.width() as u32, image.height() as u32, bytes)
        .expect("buffer matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e),
        })
}

pub fn write_mask(path: &Path, mask: &LabelMask) -> Result<()> {
    let buf = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, mask.data().to_vec())
        .expect("buffer matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e),
        })
}

/// Nearest-neighbour mask resize; never introduces new labels.
pub fn resize_mask(mask: &LabelMask, out_h: usize, out_w: usize) -> Result<LabelMask> {
    if (mask.height(), mask.width()) == (out_h, out_w) {
        return Ok(mask.clone());
    }
    LabelMask::new(
        out_h,
        out_w,
        1,
        nearest_resize(mask.data(), mask.height(), mask.width(), out_h, out_w),
    )
}

/// Checks every mask value is a class index or the ignore value.
pub fn check_mask(mask: &LabelMask, classes: usize, ignore: u8, path: &Path) -> Result<()> {
    if let Some(&bad) = mask
        .data()
        .iter()
        .find(|&&v| v != ignore && usize::from(v) >= classes)
    {
        return Err(Error::input(format!(
            "mask {} contains label {bad} outside {classes} classes",
            path.display()
        )));
    }
    Ok(())
}

/// Image and mask resized to `image_side²`; masks are validated against the
/// registry.
pub fn load_sample(sample: &Sample, image_side: usize, classes: usize, ignore: u8) -> Result<(ImageGrid, LabelMask)> {
    let image = read_image(&sample.image)?;
    let mask = read_mask(&sample.mask)?;
    if (image.height(), image.width()) != (mask.height(), mask.width()) {
        return Err(Error::input(format!(
            "image {} is {}x{} but its mask is {}x{}",
            sample.image.display(),
            image.height(),
            image.width(),
            mask.height(),
            mask.width()
        )));
    }
    check_mask(&mask, classes, ignore, &sample.mask)?;
    let image = image.resize_bilinear(image_side, image_side)?;
    let mask = resize_mask(&mask, image_side, image_side)?;
    Ok((image, mask))
}

/// A decoded sample held in memory.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub id: String,
    pub image: ImageGrid,
    pub mask: LabelMask,
}

pub fn load_split(dataset: &Dataset, split: Split, image_side: usize) -> Result<Vec<LoadedSample>> {
    dataset
        .split(split)
        .into_iter()
        .map(|s| {
            let (image, mask) = load_sample(s, image_side, dataset.registry.len(), dataset.ignore_index)?;
            Ok(LoadedSample {
                id: s.id.clone(),
                image,
                mask,
            })
        })
        .collect()
}
