//! Tensors, reverse-mode gradients, network layers and the Adam optimizer.

mod adam;
mod layers;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use layers::{layer_forward, AttnBlock, Cond, Conv2d, Dense, Down2, GroupNorm, Layer, Mha, ResBlock, Up2};
pub use params::{Gradients, Init, ParamSet};
pub use scalar::Scalar;
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Gradients of the scalar `loss` for every parameter in `params`.
pub fn grad<F: Scalar>(tape: &Tape<F>, loss: Var, params: &ParamSet<F>) -> Result<Gradients<F>> {
    Ok(tape.backward(loss)?.for_params(params))
}
