//! Dense linear algebra, the differentiation tape, model parameters,
//! optimizer update rules, and the two-level meta-gradient.

pub mod matrix;
pub mod meta;
pub mod mlp;
pub mod optim;
pub mod tape;

pub use matrix::{sigmoid, Matrix};
pub use meta::{adapt_values, meta_grad, meta_grad_custom, GradMode, WeightedTask};
pub use mlp::{
    cross_entropy, cross_entropy_batch, forward, forward_batch, grad, Activation, Batch, Layer,
    MlpGradient, MlpParams,
};
pub use optim::{sgd_step, AdamState};
pub use tape::{NodeId, Tape};
