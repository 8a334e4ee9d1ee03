pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod refine;
pub mod rotsim;
pub mod train;

pub use backbone::{BackboneSource, BackboneSpec, PromptTemplate};
pub use config::RunConfig;
pub use data::{Dataset, LoadedSample, Split};
pub use decoder::DecoderConfig;
pub use error::{Error, Result};
pub use grid::{FeatureGrid, ImageGrid, LabelMask, LogitMap, Orientation, IGNORE_INDEX};
pub use metrics::{ConfusionMatrix, MetricsReport};
pub use pipeline::{Model, ModelConfig};
pub use refine::RefineConfig;
pub use rotsim::OrientationConfig;
pub use train::{Checkpoint, TrainConfig, Trainer};
