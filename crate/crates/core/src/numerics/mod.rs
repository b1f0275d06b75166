//! Dense tensors, reverse-mode differentiation and optimization.

pub mod gradcheck;
pub mod optim;
pub mod registry;
pub mod tape;
pub mod tensor;

pub use gradcheck::{check_gradient, check_gradient_sampled, GradCheck};
pub use optim::{cosine_lr, AdamW, AdamWConfig, Ema, ParamSet};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
