//! Structure-guided image completion: synthetic panoptic data, hole masks,
//! guidance encoders, aligned object crops, a cascaded-modulation generator,
//! an image/object-level discriminator ensemble with frozen semantic branches,
//! the adversarial + perceptual objective, FID/IDS metrics, training, and the
//! automatic inpainting pipeline.

pub mod checkpoint;
pub mod discriminators;
pub mod error;
pub mod generator;
pub mod guidance;
pub mod losses;
pub mod masks;
pub mod metrics;
pub mod nn;
pub mod objectalign;
pub mod pipeline;
pub mod pngio;
pub mod raster;
pub mod scenes;
pub mod tensors;
pub mod training;

pub use discriminators::{DiscriminatorEnsemble, EnsembleConfig, Member};
pub use error::{Error, Result};
pub use generator::{Generator, GeneratorConfig};
pub use guidance::{GuidanceKind, GuidanceMap};
pub use objectalign::{BBox, CropConfig, ObjectCrop};
pub use pipeline::{Pipeline, PipelineConfig, Segmenter};
pub use raster::{Grid, HoleMask, InstanceMap, RgbImage, SemanticMap};
pub use training::{TrainConfig, TrainState};
pub use scenes::{PanopticScene, SceneConfig};
