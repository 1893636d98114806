//! Dense `f64` tensors with tape-based reverse-mode differentiation, and the
//! layers and optimizers built on them.

pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use layers::{BatchNorm, CausalConv, Linear, LstmCell};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{apply_buffer_updates, Ctx, Param, ParamId, ParamStore};
pub use tape::{activate, negbin_log_pmf, softplus_inverse, Activation, BatchStats, Gradients, Tape, Var};
pub use tensor::Tensor;
