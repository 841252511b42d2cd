//! A unified many-to-many image-to-image translation model: one generator
//! serves every domain pair, conditioned on a target-domain label and an
//! injected random latent code, trained adversarially with domain
//! classification, cycle consistency, latent-code recovery, and a KL prior.
//!
//! Module map:
//!
//! - [`config`] — configuration schema, loading, and the learning-rate schedule
//! - [`rng`] — seeded, named random streams (everything reproducible flows
//!   through these)
//! - [`tensor`] — a small f64 tape autodiff engine with support for
//!   differentiating through gradients (needed by the gradient penalty)
//! - [`nn`] — generator, encoder, and discriminator networks plus the
//!   label/latent injection mechanism
//! - [`objectives`] — every loss term and the weighted totals
//! - [`data`] — folder-per-domain ingestion, augmentation, and the synthetic
//!   toy dataset
//! - [`trainer`] — the alternating optimization loop, checkpoints, and logs
//! - [`metrics`] — Fréchet feature distance and pairwise diversity scoring

pub mod config;
pub mod data;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use config::{Backbone, ConfigError, LossWeights, ModelConfig, TrainConfig};
pub use rng::RandomSource;
pub use tensor::{Tape, Tensor, Var};
