//! Minimal reverse-mode autodiff: tensors, a tape, dense / conv layers and Adam.

mod adam;
mod layers;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState, DEFAULT_LR};
pub use layers::{zero_init_last_layer, Activation, Conv, ConvStack, Dense, Mlp};
pub use params::{uniform_fan_in, Bound, ParamId, ParamStore};
pub use tape::{CustomOp, Tape, Var};
pub use tensor::Tensor;


#[cfg(test)]
mod tests;
