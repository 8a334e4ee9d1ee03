//! Synthetic scenes: coloured bars, rectangles and ellipses on a plain
//! background, at random scales and (optionally) random orientations.
//!
//! Class 0 is the background. Class `c > 0` has shape kind `(c - 1) % 3`
//! (bar, rectangle, ellipse) and a colour of its own. Categories are dealt to
//! shapes round-robin across the dataset so every class appears once the
//! dataset holds enough shapes.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{write_image, write_manifest, write_mask, Manifest, ManifestSample, Split, MANIFEST_FILE, MANIFEST_VERSION};
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, LabelMask, Orientation, IGNORE_INDEX};

pub const MAX_SYNTH_CATEGORIES: usize = 8;

const NAMES: [&str; MAX_SYNTH_CATEGORIES] = [
    "background",
    "red bar",
    "green rectangle",
    "blue ellipse",
    "yellow bar",
    "magenta rectangle",
    "cyan ellipse",
    "orange bar",
];

const COLORS: [[f32; 3]; MAX_SYNTH_CATEGORIES] = [
    [0.35, 0.35, 0.35],
    [0.85, 0.15, 0.15],
    [0.15, 0.75, 0.20],
    [0.20, 0.30, 0.90],
    [0.90, 0.85, 0.15],
    [0.85, 0.20, 0.80],
    [0.15, 0.80, 0.85],
    [0.95, 0.55, 0.10],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_images: usize,
    pub image_side: usize,
    /// Including the background class.
    pub num_categories: usize,
    /// Inclusive range of shapes per image.
    pub shapes_per_image: [usize; 2],
    /// Shape size as a fraction of the image side.
    pub scale_range: [f64; 2],
    pub orientation_jitter: bool,
    /// Also write each training image rotated by a quarter turn as the
    /// validation split.
    pub rotated_val: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_images: 16,
            image_side: 384,
            num_categories: 4,
            shapes_per_image: [1, 3],
            scale_range: [0.05, 0.6],
            orientation_jitter: true,
            rotated_val: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_images == 0 || self.image_side == 0 {
            return Err(Error::config("num_images and image_side must be positive"));
        }
        if !(2..=MAX_SYNTH_CATEGORIES).contains(&self.num_categories) {
            return Err(Error::config(format!(
                "num_categories must be in 2..={MAX_SYNTH_CATEGORIES}, got {}",
                self.num_categories
            )));
        }
        let [lo, hi] = self.shapes_per_image;
        if lo == 0 || lo > hi {
            return Err(Error::config(format!("invalid shapes_per_image range [{lo}, {hi}]")));
        }
        let [a, b] = self.scale_range;
        if !(a > 0.0 && a <= b && b <= 1.0) {
            return Err(Error::config(format!("scale_range [{a}, {b}] must lie in (0, 1]")));
        }
        Ok(())
    }

    pub fn category_names(&self) -> Vec<String> {
        NAMES[..self.num_categories].iter().map(|s| s.to_string()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Bar,
    Rectangle,
    Ellipse,
}

fn kind_of(class: usize) -> Kind {
    match (class - 1) % 3 {
        0 => Kind::Bar,
        1 => Kind::Rectangle,
        _ => Kind::Ellipse,
    }
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    class: usize,
    cx: f64,
    cy: f64,
    /// Half extents along the shape's own axes.
    hu: f64,
    hv: f64,
    angle: f64,
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        match kind_of(self.class) {
            Kind::Ellipse => (u / self.hu).powi(2) + (v / self.hv).powi(2) <= 1.0,
            _ => u.abs() <= self.hu && v.abs() <= self.hv,
        }
    }
}

/// One generated scene.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image: ImageGrid,
    pub mask: LabelMask,
}

/// Renders one scene; `next_class` deals categories round-robin.
fn render(cfg: &SynthConfig, rng: &mut ChaCha8Rng, next_class: &mut usize) -> Result<Scene> {
    let side = cfg.image_side;
    let n_shapes = rng.random_range(cfg.shapes_per_image[0]..=cfg.shapes_per_image[1]);
    let shapes: Vec<Shape> = (0..n_shapes)
        .map(|_| {
            let class = 1 + *next_class % (cfg.num_categories - 1);
            *next_class += 1;
            let size = rng.random_range(cfg.scale_range[0]..=cfg.scale_range[1]) * side as f64;
            let aspect = match kind_of(class) {
                Kind::Bar => 0.3,
                Kind::Rectangle => 0.7,
                Kind::Ellipse => 0.6,
            };
            let angle = if cfg.orientation_jitter {
                rng.random_range(0.0..std::f64::consts::PI)
            } else {
                0.0
            };
            let half = size / 2.0;
            Shape {
                class,
                cx: rng.random_range(half.min(side as f64 / 2.0)..=(side as f64 - half).max(side as f64 / 2.0)),
                cy: rng.random_range(half.min(side as f64 / 2.0)..=(side as f64 - half).max(side as f64 / 2.0)),
                hu: half,
                hv: half * aspect,
                angle,
            }
        })
        .collect();
    let mut pixels = Vec::with_capacity(side * side * 3);
    let mut labels = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            // Later shapes are drawn on top.
            let class = shapes
                .iter()
                .rev()
                .find(|s| s.contains(x, y))
                .map_or(0, |s| s.class);
            labels.push(class as u8);
            pixels.extend_from_slice(&COLORS[class]);
        }
    }
    Ok(Scene {
        image: ImageGrid::from_rgb(side, side, pixels)?,
        mask: LabelMask::new(side, side, 1, labels)?,
    })
}

/// All scenes of a configuration, in order. A pure function of `cfg`.
pub fn generate_scenes(cfg: &SynthConfig) -> Result<Vec<Scene>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut next_class = 0;
    (0..cfg.num_images)
        .map(|_| render(cfg, &mut rng, &mut next_class))
        .collect()
}

/// Per-class pixel counts over a set of masks.
pub fn label_histogram<'a>(masks: impl IntoIterator<Item = &'a LabelMask>, classes: usize) -> Vec<u64> {
    let mut hist = vec![0u64; classes];
    for m in masks {
        for &v in m.data() {
            if let Some(h) = hist.get_mut(usize::from(v)) {
                *h += 1;
            }
        }
    }
    hist
}

/// Writes `images/`, `masks/` and the manifest under `out_dir`; returns the
/// manifest path. Fails if some category never appears.
pub fn synth_generate(cfg: &SynthConfig, out_dir: &Path) -> Result<PathBuf> {
    let scenes = generate_scenes(cfg)?;
    let hist = label_histogram(scenes.iter().map(|s| &s.mask), cfg.num_categories);
    if let Some(missing) = hist.iter().position(|&n| n == 0) {
        return Err(Error::config(format!(
            "category {:?} never appears; increase num_images or shapes_per_image",
            NAMES[missing]
        )));
    }
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut samples = Vec::new();
    let mut emit = |id: String, scene: &Scene, split: Split| -> Result<()> {
        let image = PathBuf::from(format!("images/{id}.png"));
        let mask = PathBuf::from(format!("masks/{id}.png"));
        write_image(&out_dir.join(&image), &scene.image)?;
        write_mask(&out_dir.join(&mask), &scene.mask)?;
        samples.push(ManifestSample { image, mask, split });
        Ok(())
    };
    for (i, scene) in scenes.iter().enumerate() {
        emit(format!("{i:04}"), scene, Split::Train)?;
    }
    if cfg.rotated_val {
        let turn = Orientation::new(1)?;
        for (i, scene) in scenes.iter().enumerate() {
            let rotated = Scene {
                image: scene.image.rotate(turn)?,
                mask: scene.mask.rotate(turn)?,
            };
            emit(format!("{i:04}_r1"), &rotated, Split::Val)?;
        }
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        dataset_id: "synth".into(),
        categories: cfg.category_names(),
        ignore_index: IGNORE_INDEX,
        samples,
    };
    let path = out_dir.join(MANIFEST_FILE);
    write_manifest(&path, &manifest)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_manifest, load_split};

    fn small() -> SynthConfig {
        SynthConfig {
            num_images: 4,
            image_side: 32,
            num_categories: 4,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        synth_generate(&small(), a.path()).unwrap();
        synth_generate(&small(), b.path()).unwrap();
        for f in ["manifest.json", "images/0000.png", "masks/0003.png"] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap()
            );
        }
    }

    #[test]
    fn every_category_appears() {
        let scenes = generate_scenes(&small()).unwrap();
        let hist = label_histogram(scenes.iter().map(|s| &s.mask), 4);
        assert!(hist.iter().all(|&n| n > 0), "{hist:?}");
    }

    #[test]
    fn missing_category_is_an_error() {
        let cfg = SynthConfig {
            num_images: 1,
            shapes_per_image: [1, 1],
            num_categories: 5,
            ..small()
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(synth_generate(&cfg, dir.path()), Err(Error::Config(_))));
    }

    #[test]
    fn no_jitter_gives_axis_aligned_bars() {
        let cfg = SynthConfig {
            num_images: 6,
            image_side: 64,
            num_categories: 2,
            orientation_jitter: false,
            scale_range: [0.3, 0.5],
            shapes_per_image: [1, 1],
            ..SynthConfig::default()
        };
        for scene in generate_scenes(&cfg).unwrap() {
            // The bar's pixels form a filled axis-aligned box.
            let pts: Vec<(usize, usize)> = (0..64 * 64)
                .filter(|&p| scene.mask.data()[p] == 1)
                .map(|p| (p / 64, p % 64))
                .collect();
            let (r0, r1) = (pts.iter().map(|p| p.0).min().unwrap(), pts.iter().map(|p| p.0).max().unwrap());
            let (c0, c1) = (pts.iter().map(|p| p.1).min().unwrap(), pts.iter().map(|p| p.1).max().unwrap());
            assert_eq!(pts.len(), (r1 - r0 + 1) * (c1 - c0 + 1));
            assert!(c1 - c0 > r1 - r0);
        }
    }

    #[test]
    fn rotated_validation_split() {
        let cfg = SynthConfig {
            rotated_val: true,
            ..small()
        };
        let dir = tempfile::tempdir().unwrap();
        let path = synth_generate(&cfg, dir.path()).unwrap();
        let ds = load_manifest(&path).unwrap();
        let train = load_split(&ds, Split::Train, 32).unwrap();
        let val = load_split(&ds, Split::Val, 32).unwrap();
        assert_eq!(train.len(), val.len());
        let turn = Orientation::new(1).unwrap();
        for (t, v) in train.iter().zip(&val) {
            assert_eq!(t.mask.rotate(turn).unwrap(), v.mask);
            assert_eq!(t.image.rotate(turn).unwrap(), v.image);
        }
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig { num_categories: 9, ..small() }.validate().is_err());
        assert!(SynthConfig { scale_range: [0.0, 0.5], ..small() }.validate().is_err());
        assert!(SynthConfig { shapes_per_image: [3, 2], ..small() }.validate().is_err());
    }
}
