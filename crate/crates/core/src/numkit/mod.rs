//! Dense numeric substrate: tensors, MLPs with explicit gradients, losses,
//! Adam and seeded random streams.

mod adam;
pub mod checkpoint;
mod loss;
mod mlp;
mod rng;
mod tensor;

pub use adam::AdamState;
pub use loss::{loss_eval, LossKind, Target};
pub use mlp::{softmax, Activation, Dense, ForwardTrace, Gradients, Head, MlpModel, MlpSpec};
pub use rng::RngStream;
pub use tensor::Tensor;

pub(crate) use tensor::affine;
