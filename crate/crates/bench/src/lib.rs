//! Fixtures shared by the benchmarks.

use ovrs_core::data::synth::{generate_scenes, SynthConfig};
use ovrs_core::{ImageGrid, LabelMask, ModelConfig};

/// One synthetic scene of side `side` with `classes` categories.
pub fn scene(side: usize, classes: usize) -> (ImageGrid, LabelMask, Vec<String>) {
    let cfg = SynthConfig {
        num_images: 1,
        image_side: side,
        num_categories: classes,
        ..SynthConfig::default()
    };
    let s = generate_scenes(&cfg).expect("valid synth config").remove(0);
    (s.image, s.mask, cfg.category_names())
}

pub fn small_model(d_f: usize) -> ModelConfig {
    ModelConfig {
        d_f,
        ..ModelConfig::default()
    }
}
