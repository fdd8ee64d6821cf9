//! Velocity networks, parameter-tree operations and checkpoints.

mod checkpoint;
mod net;
mod params;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, CheckpointMeta, FORMAT_VERSION, MAGIC};
pub use net::{Bound, Condition, FeatureTaps, NetConfig, NetOutput, Times, VelocityNet};
pub use params::{ema_update, merge_interpolate, quantize_params, quantize_tensor, ParamSet, SUPPORTED_BITS};

use crate::error::Result;

/// Quantize-dequantize every parameter tensor; the input net is untouched.
pub fn quantize_weights(net: &VelocityNet, bits: u32) -> Result<VelocityNet> {
    VelocityNet::from_params(*net.config(), quantize_params(net.params(), bits)?)
}

/// Storage bytes for the parameters at a given bit width.
pub fn parameter_bytes(net: &VelocityNet, bits: u32) -> usize {
    (net.params().num_scalars() * bits as usize).div_ceil(8)
}
