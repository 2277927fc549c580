//! Numeric primitives, parameter storage, optimizer and checkpoints.

mod adam;
mod checkpoint;
pub mod ops;
mod params;
mod tensor;

pub use adam::{adam_update, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use ops::{
    apply_activation, apply_activation_vjp, apply_layer_norm, apply_layer_norm_vjp, apply_linear,
    apply_linear_vjp, Activation, LayerNormGrads, LinearGrads,
};
pub use params::{ParamInit, ParamStore};
pub use tensor::Tensor;
