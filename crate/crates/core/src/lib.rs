//! Visible-infrared person re-identification trained with a privileged
//! intermediate domain.
//!
//! Training sees three streams: visible (RGB), infrared (one channel) and an
//! intermediate stream synthesized from each visible image by a random convex
//! mix of its color channels. Only the visible and infrared streams exist at
//! test time. The pieces:
//!
//! - [`tensor`] and [`autodiff`]: a small reverse-mode engine over `f64`.
//! - [`imaging`]: channel mixing, grayscale, spatial augmentation, PPM/PGM.
//! - [`model`]: per-modality stems feeding a shared trunk and classifier.
//! - [`losses`]: batch-hard triplet terms, color-free loss, identity loss.
//! - [`data`]: datasets, PK sampling, the synthetic "color trap" generator.
//! - [`eval`]: CMC/mAP under single- and multi-shot protocols, MMD, histograms.
//! - [`trainer`]: the SGD loop and the ablation grid.
//! - [`persist`] and [`config`]: checkpoints and run configuration.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod losses;
pub mod modality;
pub mod model;
pub mod optim;
pub mod persist;
pub mod rng;
pub mod tensor;
pub mod trainer;


pub use config::RunConfig;
pub use data::{Dataset, Sample, Split, SynthConfig};
pub use error::{Error, Result};
pub use eval::{EmbeddingRecord, EvalProtocol, EvalReport, ShotMode};
pub use imaging::{Image, MixWeights};
pub use losses::{LossBreakdown, LossConfig};
pub use modality::Modality;
pub use model::{ModelConfig, ModelParams};
pub use persist::Checkpoint;
pub use trainer::{IntermediateMode, TrainConfig, TrainLog};
