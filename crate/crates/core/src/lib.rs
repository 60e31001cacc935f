//! Retinal vessel segmentation for infra-red SLO images: data loading,
//! augmentation, a CPU U-Net with training, evaluation, inference and
//! vascular metrics.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod inference;
pub mod model;
pub mod nn;
pub mod plane;
pub mod rng;
pub mod synthetic;
pub mod train;
pub mod vmetrics;

pub use dataio::{DatasetSplit, LabelledImage, SloImage, VesselMask, WindowSample};
pub use error::{Error, Result};
pub use eval::{ConfusionCounts, EvalReport};
pub use inference::{ProbabilityMap, TilingPolicy};
pub use model::{build_unet, Model, UNetConfig, UpsampleMode};
pub use plane::Plane;
pub use train::{TrainConfig, TrainHistory};

/// Version string recorded in checkpoints' sidecars and run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
