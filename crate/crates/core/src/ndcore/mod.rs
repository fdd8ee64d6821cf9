//! Tensor arithmetic, reverse-mode differentiation, AdamW and seeded RNG.

mod adamw;
mod gradcheck;
mod rng;
mod tape;
mod tensor;

pub use adamw::{AdamW, AdamWConfig};
pub use gradcheck::{check_gradients, relative_error, GradCheck, RELATIVE_FLOOR};
pub use rng::{Rng, RngState};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) use tape::softplus;
