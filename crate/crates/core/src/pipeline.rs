//! The full model: backbone, rotation-aggregative similarity, refinement,
//! scale-aware upsampling and the per-category head.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::backbone::{
    build_encoders, BackboneSource, BackboneSpec, ClassEmbedding, PromptTemplate, TextEncoder, VisionEncoder,
};
use crate::decoder::{Decoder, DecoderConfig, Head};
use crate::error::{Error, Result, StageExt};
use crate::data::resize_mask;
use crate::grid::{ImageGrid, LabelMask, LogitMap};
use crate::nn::{Ctx, ParamStore};
use crate::refine::{RefineBlock, RefineConfig};
use crate::rotsim::{generate_rotated_views, OrientationConfig, RotSim};

/// Largest category count representable in 8-bit masks next to the ignore
/// value.
pub const MAX_CATEGORIES: usize = 255;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneSpec,
    pub backbone_source: BackboneSource,
    pub backbone_trainable: bool,
    pub orientations: OrientationConfig,
    /// Spatial kernel of the similarity embedding.
    pub embed_kernel: usize,
    pub refine: RefineConfig,
    pub decoder: DecoderConfig,
    pub d_f: usize,
    pub template: PromptTemplate,
    /// Parameter initialisation seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneSpec::default(),
            backbone_source: BackboneSource::default(),
            backbone_trainable: false,
            orientations: OrientationConfig::default(),
            embed_kernel: 1,
            refine: RefineConfig::default(),
            decoder: DecoderConfig::default(),
            d_f: 128,
            template: PromptTemplate::default(),
            seed: 42,
        }
    }
}

impl ModelConfig {
    /// Cross-module checks that do not need the encoders.
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.d_f == 0 {
            return Err(Error::config("d_f must be positive"));
        }
        if self.embed_kernel % 2 == 0 {
            return Err(Error::config(format!(
                "embed_kernel must be odd, got {}",
                self.embed_kernel
            )));
        }
        self.refine.validate(self.d_f)?;
        self.decoder.validate(self.backbone.num_levels())
    }
}

/// One row of [`Model::parameter_census`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CensusEntry {
    pub name: String,
    pub module: String,
    pub shape: Vec<usize>,
    pub count: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Census {
    pub entries: Vec<CensusEntry>,
}

impl Census {
    pub fn total(&self) -> usize {
        self.entries.iter().map(|e| e.count).sum()
    }

    pub fn trainable_total(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.count).sum()
    }

    /// Parameters whose names start with `prefix`.
    pub fn prefix_total(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.count)
            .sum()
    }
}

pub struct Model {
    config: ModelConfig,
    vision: Box<dyn VisionEncoder>,
    text: Box<dyn TextEncoder>,
    store: ParamStore,
    rotsim: RotSim,
    refine: RefineBlock,
    decoder: Decoder,
    head: Head,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("params", &self.store.len())
            .finish()
    }
}

impl Model {
    pub fn new(mut config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (vision, text) = build_encoders(&config.backbone_source, &config.backbone)?;
        // External weights define their own geometry.
        config.backbone = vision.spec().clone();
        config.validate()?;
        let spec = vision.spec();
        if text.embed_dim() != spec.embed_dim {
            return Err(Error::IncompatibleRegistry(format!(
                "text width {} differs from vision width {}",
                text.embed_dim(),
                spec.embed_dim
            )));
        }
        let mut store = ParamStore::new(config.seed);
        vision.register_params(&mut store, config.backbone_trainable)?;
        let rotsim = RotSim::new(&mut store, config.orientations.clone(), config.embed_kernel, config.d_f)?;
        let refine = RefineBlock::new(&mut store, config.d_f, &config.refine)?;
        let decoder = Decoder::new(
            &mut store,
            &config.decoder,
            spec.num_levels(),
            spec.embed_dim,
            config.d_f,
        )?;
        let head = Head::new(&mut store, config.d_f)?;
        Ok(Self {
            config,
            vision,
            text,
            store,
            rotsim,
            refine,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn vision(&self) -> &dyn VisionEncoder {
        self.vision.as_ref()
    }

    pub fn rotsim(&self) -> &RotSim {
        &self.rotsim
    }

    pub fn refine(&self) -> &RefineBlock {
        &self.refine
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    /// Embeds a category list after checking it is non-empty and
    /// duplicate-free.
    pub fn class_embeddings(&self, categories: &[String]) -> Result<Vec<ClassEmbedding>> {
        check_categories(categories)?;
        let classes = self
            .text
            .encode_all(&self.config.template, categories)
            .stage("backbone")?;
        let d = self.vision.spec().embed_dim;
        if let Some(c) = classes.iter().find(|c| c.dim() != d) {
            return Err(Error::IncompatibleRegistry(format!(
                "text embedding for `{}` has dimension {}, vision features have {d}",
                c.category_name(),
                c.dim()
            )));
        }
        Ok(classes)
    }

    pub fn check_image(&self, image: &ImageGrid) -> Result<()> {
        if !image.is_square() {
            return Err(Error::shape(format!(
                "model input must be square, got {}x{}",
                image.height(),
                image.width()
            )));
        }
        self.vision.spec().grid_side(image.height()).map(|_| ())
    }

    /// Builds the forward graph; returns logits `[H, W, N_C]`.
    pub fn forward_graph<'t>(
        &self,
        cx: &Ctx<'t>,
        image: &ImageGrid,
        classes: &[ClassEmbedding],
    ) -> Result<Var<'t>> {
        self.check_image(image)?;
        if classes.is_empty() {
            return Err(Error::input("at least one category is required"));
        }
        let d = self.vision.spec().embed_dim;
        let class_data: Vec<f64> = classes.iter().flat_map(|c| c.vector().iter().copied()).collect();
        let class_var = cx.constant(Tensor::new(&[classes.len(), d], class_data).stage("backbone")?);

        let views = generate_rotated_views(image, self.rotsim.config()).stage("rotsim")?;
        let mut base_levels = Vec::new();
        let mut deepest = Vec::with_capacity(views.len());
        for (k, view) in views.iter().enumerate() {
            let mut levels = self.vision.encode_levels(cx, view).stage("backbone")?;
            deepest.push(*levels.last().expect("validated non-empty levels"));
            if k == 0 {
                base_levels = std::mem::take(&mut levels);
            }
        }
        let m = self.rotsim.forward(cx, &deepest, &class_var).stage("rotsim")?;
        let m = self.refine.forward(cx, m).stage("refine")?;
        let m = self.decoder.forward(cx, m, &base_levels).stage("decoder")?;
        self.head
            .forward(cx, m, image.height(), image.width())
            .stage("head")
    }

    /// Inference on free-form category names.
    pub fn forward(&self, image: &ImageGrid, categories: &[String]) -> Result<LogitMap> {
        let classes = self.class_embeddings(categories)?;
        self.forward_embedded(image, &classes)
    }

    /// Label mask at the image's own resolution: the image is resized to
    /// `side²` for the forward pass and the argmax is resized back with
    /// nearest sampling.
    pub fn predict_labels(&self, image: &ImageGrid, classes: &[ClassEmbedding], side: usize) -> Result<LabelMask> {
        let input = if (image.height(), image.width()) == (side, side) {
            image.clone()
        } else {
            image.resize_bilinear(side, side)?
        };
        let pred = self.forward_embedded(&input, classes)?.argmax();
        resize_mask(&pred, image.height(), image.width())
    }

    pub fn forward_embedded(&self, image: &ImageGrid, classes: &[ClassEmbedding]) -> Result<LogitMap> {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &self.store);
        let logits = self.forward_graph(&cx, image, classes)?.value();
        if !logits.all_finite() {
            return Err(Error::BackboneFault("non-finite logits".into())).stage("head");
        }
        let s = logits.shape().to_vec();
        LogitMap::new(s[0], s[1], s[2], logits.to_vec())
    }

    pub fn parameter_census(&self) -> Census {
        Census {
            entries: self
                .store
                .iter()
                .map(|(name, p)| CensusEntry {
                    name: name.to_string(),
                    module: name.split('.').next().unwrap_or_default().to_string(),
                    shape: p.value.shape().to_vec(),
                    count: p.value.numel(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }
}

pub fn check_categories(categories: &[String]) -> Result<()> {
    if categories.is_empty() {
        return Err(Error::input("at least one category is required"));
    }
    if categories.len() > MAX_CATEGORIES {
        return Err(Error::input(format!(
            "{} categories exceed the limit of {MAX_CATEGORIES}",
            categories.len()
        )));
    }
    for (i, c) in categories.iter().enumerate() {
        if c.trim().is_empty() {
            return Err(Error::input("category names must be non-empty"));
        }
        if categories[..i].iter().any(|o| o.trim() == c.trim()) {
            return Err(Error::input(format!("duplicate category {c:?}")));
        }
    }
    Ok(())
}
