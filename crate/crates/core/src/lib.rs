//! Two-stage unconditional scene synthesis through a discrete semantic layout.
//!
//! A progressive generator produces per-pixel class maps (made trainable with
//! Gumbel-softmax sampling and a straight-through argmax), a spatially-adaptive
//! normalization generator paints images from those maps, and the two are
//! fine-tuned jointly against an unconditional image discriminator.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod end2end;
pub mod error;
pub mod eval;
pub mod imgsynth;
pub mod nn;
pub mod rng;
pub mod seggen;

pub use error::{Error, Result};

pub use autograd::{Tensor, Var};
pub use checkpoint::Checkpoint;
pub use data::{Dataset, Image, SceneSample, SegMap, Split, ToyWorldSpec};
pub use end2end::{AblationSetting, FineTuneConfig, UncondDiscriminator};
pub use eval::{EmbeddingModel, GaussianStats, SurrogateEmbedder};
pub use imgsynth::{CondDiscriminator, SpadeConfig, SpadeGenerator, SurrogateFeatureExtractor};
pub use seggen::{GumbelConfig, ProgressiveSchedule, SegCritic, SegGenerator, SegNetConfig};
