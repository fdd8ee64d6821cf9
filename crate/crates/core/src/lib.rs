//! Few-step rectified-flow distillation on toy 2D conditional distributions.
//!
//! The crate is organized bottom-up:
//!
//! - [`ndcore`]: tensors, a reverse-mode tape, AdamW and seeded RNG streams.
//! - [`flow`]: the straight noising path, velocity/score/endpoint conversions,
//!   schedules and Euler sampling with classifier-free guidance.
//! - [`models`]: the conditional velocity MLP, EMA/merge/quantization and the
//!   checkpoint format.
//! - [`teacher`]: synthetic datasets, flow-matching training, analytic oracles.
//! - [`adversarial`]: multi-head discriminator over proxy features.
//! - [`distill`]: trajectory-guidance pretraining, distribution matching with
//!   timestep sharing, split-timestep fine-tuning and 4 to 2 step staging.
//! - [`eval`]: MMD, energy distance, mode coverage, conditional accuracy,
//!   ablation and quantization tables.

pub mod adversarial;
pub mod config;
pub mod distill;
pub mod error;
pub mod eval;
pub mod flow;
pub mod io;
pub mod models;
pub mod ndcore;
pub mod teacher;

pub use error::{Error, Result};
pub use flow::{Schedule, VelocityField};
pub use models::{Condition, FeatureTaps, NetConfig, VelocityNet};
pub use ndcore::{Rng, Tensor};
