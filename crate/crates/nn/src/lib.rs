//! A small CPU network stack for pixel-input policies and value functions.
//!
//! Networks are sequential stacks of [`Layer`]s operating on batched, row-major
//! [`Tensor`]s. The stack is generic over the scalar type: production training
//! runs in `f32`, while gradient checks run the same code in `f64`.

mod adam;
mod checkpoint;
mod error;
mod gradcheck;
mod layer;
mod loss;
mod network;
mod scalar;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use error::NnError;
pub use gradcheck::{grad_check, loss_value, GradCheckReport, LossSpec};
pub use layer::{Layer, LayerKind};
pub use loss::{mse_loss, nll_loss, LossValue, PROB_FLOOR};
pub use network::{Mode, Network, NetworkBuilder};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Result<T, E = NnError> = std::result::Result<T, E>;
