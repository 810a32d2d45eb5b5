//! Minimal reverse-mode differentiation: tensors, a tape, layers,
//! orthogonal initialization and Adam.

mod init;
mod layers;
mod optim;
mod tape;
mod tensor;

pub use init::orthogonal_init;
pub use layers::{Bound, LayerSpec, Sequential};
pub use optim::{adam_step, clip_grad_norm, clip_grad_norm_groups, AdamState};
pub use tape::{Gradients, Tape, Var, INSTANCE_NORM_EPS};
pub use tensor::Tensor;

