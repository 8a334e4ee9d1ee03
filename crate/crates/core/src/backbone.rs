//! Vision-language feature extractors.
//!
//! The pipeline talks to encoders through [`VisionEncoder`] and
//! [`TextEncoder`]. Two families are provided:
//!
//! * [`MockVisionEncoder`] / [`MockTextEncoder`]: deterministic seeded
//!   encoders. The vision mock maps each patch's mean colour through a fixed
//!   matrix per level, which makes it exactly equivariant to quarter-turn
//!   rotations. All tests run on these.
//! * [`PatchEmbedEncoder`] / [`TableTextEncoder`]: adapters around externally
//!   supplied weights (a patch-embedding projection followed by per-level
//!   token maps, and a precomputed text-embedding table).

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{FeatureGrid, ImageGrid};
use crate::nn::{stable_seed, Ctx, Init, ParamStore};

pub const DEFAULT_TEMPLATE: &str = "an image of {}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSpec {
    pub embed_dim: usize,
    pub patch_size: usize,
    /// Encoder layers exposed as the feature pyramid, shallow to deep. The
    /// last one feeds the similarity computation.
    pub level_ids: Vec<usize>,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        // Thirds of a 12-layer transformer.
        Self {
            embed_dim: 64,
            patch_size: 16,
            level_ids: vec![4, 8, 12],
        }
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.patch_size == 0 {
            return Err(Error::config("embed_dim and patch_size must be positive"));
        }
        if self.level_ids.is_empty() {
            return Err(Error::config("backbone needs at least one feature level"));
        }
        if self.level_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "level_ids must be strictly increasing, got {:?}",
                self.level_ids
            )));
        }
        Ok(())
    }

    pub fn num_levels(&self) -> usize {
        self.level_ids.len()
    }

    /// Token-grid side for an image side.
    pub fn grid_side(&self, image_side: usize) -> Result<usize> {
        if image_side == 0 || image_side % self.patch_size != 0 {
            return Err(Error::shape(format!(
                "image side {image_side} is not divisible by patch size {}",
                self.patch_size
            )));
        }
        Ok(image_side / self.patch_size)
    }
}

/// Text with exactly one `{}` placeholder for the category name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PromptTemplate {
    pattern: String,
}

impl PromptTemplate {
    pub fn new(pattern: impl Into<String>) -> Result<Self> {
        let pattern = pattern.into();
        let count = pattern.matches("{}").count();
        if count != 1 {
            return Err(Error::config(format!(
                "prompt template needs exactly one {{}} placeholder, found {count} in {pattern:?}"
            )));
        }
        Ok(Self { pattern })
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn render(&self, category_name: &str) -> String {
        self.pattern.replacen("{}", category_name, 1)
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            pattern: DEFAULT_TEMPLATE.to_string(),
        }
    }
}

impl TryFrom<String> for PromptTemplate {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        Self::new(value)
    }
}

impl From<PromptTemplate> for String {
    fn from(t: PromptTemplate) -> String {
        t.pattern
    }
}

/// Unit-norm text embedding of one category.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbedding {
    vector: Vec<f64>,
    category_name: String,
}

impl ClassEmbedding {
    /// Normalises `vector` to unit length.
    pub fn new(category_name: impl Into<String>, mut vector: Vec<f64>) -> Result<Self> {
        let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::BackboneFault(
                "text embedding has zero or non-finite norm".into(),
            ));
        }
        vector.iter_mut().for_each(|v| *v /= norm);
        Ok(Self {
            vector,
            category_name: category_name.into(),
        })
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn category_name(&self) -> &str {
        &self.category_name
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

pub trait VisionEncoder: Send + Sync {
    fn spec(&self) -> &BackboneSpec;

    /// One token grid per level, shallow to deep.
    fn encode_image_multilevel(&self, image: &ImageGrid) -> Result<Vec<FeatureGrid>>;

    /// Registers learnable weights, if the encoder has any, under
    /// `backbone.*`.
    fn register_params(&self, _store: &mut ParamStore, _trainable: bool) -> Result<()> {
        Ok(())
    }

    /// Levels as `[h, w, d]` tape values. Encoders with trainable weights
    /// route through the tape; the default wraps the plain output as
    /// constants.
    fn encode_levels<'t>(&self, cx: &Ctx<'t>, image: &ImageGrid) -> Result<Vec<Var<'t>>> {
        self.encode_image_multilevel(image)?
            .into_iter()
            .map(|g| Ok(cx.constant(feature_tensor(g)?)))
            .collect()
    }
}

pub trait TextEncoder: Send + Sync {
    fn embed_dim(&self) -> usize;

    fn encode_text(&self, template: &PromptTemplate, category_name: &str) -> Result<ClassEmbedding>;

    fn encode_all(&self, template: &PromptTemplate, names: &[String]) -> Result<Vec<ClassEmbedding>> {
        names.iter().map(|n| self.encode_text(template, n)).collect()
    }
}

pub(crate) fn feature_tensor(g: FeatureGrid) -> Result<Tensor> {
    let shape = [g.height(), g.width(), g.channels()];
    Tensor::new(&shape, g.into_data())
}

fn check_finite(levels: &[FeatureGrid]) -> Result<()> {
    if levels.iter().all(FeatureGrid::all_finite) {
        Ok(())
    } else {
        Err(Error::BackboneFault("encoder produced non-finite features".into()))
    }
}

fn check_image(spec: &BackboneSpec, image: &ImageGrid) -> Result<(usize, usize)> {
    if image.channels() != 3 {
        return Err(Error::shape(format!(
            "expected an RGB image, got {} channels",
            image.channels()
        )));
    }
    let p = spec.patch_size;
    if image.height() % p != 0 || image.width() % p != 0 {
        return Err(Error::shape(format!(
            "image {}x{} is not divisible by patch size {p}",
            image.height(),
            image.width()
        )));
    }
    Ok((image.height() / p, image.width() / p))
}

/// Per-patch mean colour, `[gh * gw, 3]`. Each patch's values are summed in
/// sorted order, so the result does not depend on pixel order within the
/// patch; a rotated image yields exactly the rotated means.
pub fn patch_means(image: &ImageGrid, patch: usize) -> Result<(usize, usize, Vec<f64>)> {
    let (h, w) = (image.height(), image.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!(
            "image {h}x{w} is not divisible by patch size {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = vec![0.0; gh * gw * 3];
    let mut buf: Vec<f32> = Vec::with_capacity(patch * patch);
    let inv = 1.0 / (patch * patch) as f64;
    for py in 0..gh {
        for px in 0..gw {
            for c in 0..3 {
                buf.clear();
                for y in py * patch..(py + 1) * patch {
                    for x in px * patch..(px + 1) * patch {
                        buf.push(image.pixel(y, x)[c]);
                    }
                }
                buf.sort_unstable_by(f32::total_cmp);
                let sum: f64 = buf.iter().map(|&v| f64::from(v)).sum();
                out[(py * gw + px) * 3 + c] = sum * inv;
            }
        }
    }
    Ok((gh, gw, out))
}

/// Deterministic per-patch colour encoder; see the module docs.
#[derive(Debug, Clone)]
pub struct MockVisionEncoder {
    spec: BackboneSpec,
    /// Per level, `[3, d]` row-major.
    projections: Vec<Vec<f64>>,
}

impl MockVisionEncoder {
    pub fn new(spec: BackboneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let d = spec.embed_dim;
        let projections = spec
            .level_ids
            .iter()
            .map(|id| {
                let mut rng = ChaCha8Rng::seed_from_u64(stable_seed(seed, &format!("mock-vision/{id}")));
                (0..3 * d)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z
                    })
                    .collect()
            })
            .collect();
        Ok(Self { spec, projections })
    }

    fn param_name(level: usize) -> String {
        format!("backbone.level{level}.proj")
    }

    pub fn projection(&self, level: usize) -> &[f64] {
        &self.projections[level]
    }
}

impl VisionEncoder for MockVisionEncoder {
    fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn encode_image_multilevel(&self, image: &ImageGrid) -> Result<Vec<FeatureGrid>> {
        check_image(&self.spec, image)?;
        let (gh, gw, means) = patch_means(image, self.spec.patch_size)?;
        let d = self.spec.embed_dim;
        let levels = self
            .projections
            .iter()
            .map(|proj| {
                let mut data = Vec::with_capacity(gh * gw * d);
                for m in means.chunks(3) {
                    for j in 0..d {
                        data.push(m[0] * proj[j] + m[1] * proj[d + j] + m[2] * proj[2 * d + j]);
                    }
                }
                FeatureGrid::new(gh, gw, d, data)
            })
            .collect::<Result<Vec<_>>>()?;
        check_finite(&levels)?;
        Ok(levels)
    }

    fn register_params(&self, store: &mut ParamStore, trainable: bool) -> Result<()> {
        for (i, proj) in self.projections.iter().enumerate() {
            store.register(
                &Self::param_name(i),
                &[3, self.spec.embed_dim],
                Init::Values(proj.clone()),
                trainable,
            )?;
        }
        Ok(())
    }

    fn encode_levels<'t>(&self, cx: &Ctx<'t>, image: &ImageGrid) -> Result<Vec<Var<'t>>> {
        let trainable = cx
            .store()
            .get(&Self::param_name(0))
            .is_some_and(|p| p.trainable);
        if !trainable {
            return self
                .encode_image_multilevel(image)?
                .into_iter()
                .map(|g| Ok(cx.constant(feature_tensor(g)?)))
                .collect();
        }
        check_image(&self.spec, image)?;
        let (gh, gw, means) = patch_means(image, self.spec.patch_size)?;
        let means = cx.constant(Tensor::new(&[gh, gw, 3], means)?);
        (0..self.projections.len())
            .map(|i| means.linear(&cx.param(&Self::param_name(i))?, None))
            .collect()
    }
}

/// Seeded hash-to-sphere text encoder.
#[derive(Debug, Clone)]
pub struct MockTextEncoder {
    dim: usize,
    seed: u64,
}

impl MockTextEncoder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("text embedding dimension must be positive"));
        }
        Ok(Self { dim, seed })
    }
}

impl TextEncoder for MockTextEncoder {
    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn encode_text(&self, template: &PromptTemplate, category_name: &str) -> Result<ClassEmbedding> {
        let name = category_name.trim();
        if name.is_empty() {
            return Err(Error::input("category name is empty"));
        }
        let prompt = template.render(name);
        let mut rng = ChaCha8Rng::seed_from_u64(stable_seed(self.seed, &format!("mock-text/{prompt}")));
        let v: Vec<f64> = (0..self.dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z
            })
            .collect();
        ClassEmbedding::new(name, v)
    }
}

/// On-disk weights for [`PatchEmbedEncoder`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchEmbedWeights {
    pub embed_dim: usize,
    pub patch_size: usize,
    /// `[3 * patch * patch, d]` row-major; input order is row, column,
    /// channel within the patch.
    pub patch_embed: Vec<f64>,
    pub levels: Vec<TokenMapWeights>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenMapWeights {
    pub layer_id: usize,
    /// `[d, d]` row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Adapter for externally trained weights: linear patch embedding followed
/// by a chain of token maps `t <- gelu(t · W + b)`, one per exposed level.
#[derive(Debug, Clone)]
pub struct PatchEmbedEncoder {
    spec: BackboneSpec,
    weights: PatchEmbedWeights,
}

impl PatchEmbedEncoder {
    pub fn from_weights(weights: PatchEmbedWeights) -> Result<Self> {
        let d = weights.embed_dim;
        let p = weights.patch_size;
        if weights.patch_embed.len() != 3 * p * p * d {
            return Err(Error::shape(format!(
                "patch_embed has {} values, expected {}",
                weights.patch_embed.len(),
                3 * p * p * d
            )));
        }
        for l in &weights.levels {
            if l.weight.len() != d * d || l.bias.len() != d {
                return Err(Error::shape(format!(
                    "level {} weights do not match embed_dim {d}",
                    l.layer_id
                )));
            }
        }
        let spec = BackboneSpec {
            embed_dim: d,
            patch_size: p,
            level_ids: weights.levels.iter().map(|l| l.layer_id).collect(),
        };
        spec.validate()?;
        Ok(Self { spec, weights })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let weights: PatchEmbedWeights = serde_json::from_str(&text).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_weights(weights)
    }
}

impl VisionEncoder for PatchEmbedEncoder {
    fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn encode_image_multilevel(&self, image: &ImageGrid) -> Result<Vec<FeatureGrid>> {
        let (gh, gw) = check_image(&self.spec, image)?;
        let p = self.spec.patch_size;
        let d = self.spec.embed_dim;
        let k = 3 * p * p;
        let mut tokens = vec![0.0; gh * gw * d];
        let mut patch = vec![0.0; k];
        for py in 0..gh {
            for px in 0..gw {
                for y in 0..p {
                    for x in 0..p {
                        let src = image.pixel(py * p + y, px * p + x);
                        for c in 0..3 {
                            patch[(y * p + x) * 3 + c] = f64::from(src[c]);
                        }
                    }
                }
                let dst = &mut tokens[(py * gw + px) * d..][..d];
                for (i, v) in patch.iter().enumerate() {
                    let row = &self.weights.patch_embed[i * d..][..d];
                    for (o, w) in dst.iter_mut().zip(row) {
                        *o += v * w;
                    }
                }
            }
        }
        let mut levels = Vec::with_capacity(self.weights.levels.len());
        for l in &self.weights.levels {
            let mut next = vec![0.0; tokens.len()];
            for (t, o) in tokens.chunks(d).zip(next.chunks_mut(d)) {
                o.copy_from_slice(&l.bias);
                for (i, v) in t.iter().enumerate() {
                    for (oo, w) in o.iter_mut().zip(&l.weight[i * d..][..d]) {
                        *oo += v * w;
                    }
                }
                o.iter_mut().for_each(|x| *x = gelu(*x));
            }
            tokens = next;
            levels.push(FeatureGrid::new(gh, gw, d, tokens.clone())?);
        }
        check_finite(&levels)?;
        Ok(levels)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044_715 * x * x * x)).tanh())
}

/// Precomputed text embeddings looked up by rendered prompt, then by bare
/// category name.
#[derive(Debug, Clone)]
pub struct TableTextEncoder {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

impl TableTextEncoder {
    pub fn new(table: HashMap<String, Vec<f64>>) -> Result<Self> {
        let dim = table
            .values()
            .next()
            .map(Vec::len)
            .ok_or_else(|| Error::config("text embedding table is empty"))?;
        if table.values().any(|v| v.len() != dim) {
            return Err(Error::shape("text embedding table has mixed dimensions"));
        }
        Ok(Self { dim, table })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table = serde_json::from_str(&text).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::new(table)
    }
}

impl TextEncoder for TableTextEncoder {
    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn encode_text(&self, template: &PromptTemplate, category_name: &str) -> Result<ClassEmbedding> {
        let name = category_name.trim();
        if name.is_empty() {
            return Err(Error::input("category name is empty"));
        }
        let v = self
            .table
            .get(&template.render(name))
            .or_else(|| self.table.get(name))
            .ok_or_else(|| {
                Error::IncompatibleRegistry(format!("no text embedding for category {name:?}"))
            })?;
        ClassEmbedding::new(name, v.clone())
    }
}

/// Which encoder pair to build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackboneSource {
    Mock {
        seed: u64,
    },
    External {
        weights: PathBuf,
        text_table: PathBuf,
    },
}

impl Default for BackboneSource {
    fn default() -> Self {
        BackboneSource::Mock { seed: 42 }
    }
}

pub type EncoderPair = (Box<dyn VisionEncoder>, Box<dyn TextEncoder>);

/// Builds the encoders. For external weights the returned spec replaces
/// `spec`.
pub fn build_encoders(source: &BackboneSource, spec: &BackboneSpec) -> Result<EncoderPair> {
    match source {
        BackboneSource::Mock { seed } => Ok((
            Box::new(MockVisionEncoder::new(spec.clone(), *seed)?),
            Box::new(MockTextEncoder::new(spec.embed_dim, *seed)?),
        )),
        BackboneSource::External {
            weights,
            text_table,
        } => {
            let vision = PatchEmbedEncoder::load(weights)?;
            let text = TableTextEncoder::load(text_table)?;
            if text.embed_dim() != vision.spec().embed_dim {
                return Err(Error::IncompatibleRegistry(format!(
                    "text table dimension {} does not match vision dimension {}",
                    text.embed_dim(),
                    vision.spec().embed_dim
                )));
            }
            Ok((Box::new(vision), Box::new(text)))
        }
    }
}
