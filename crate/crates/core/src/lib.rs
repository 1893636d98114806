//! Synthetic battery time-series generation with deep forecasting models.
//!
//! Three forecasters are trained on normalized battery measurements
//! (voltage, capacity) and then rolled forward to emit synthetic tables:
//!
//! * [`models::deepar`]: an autoregressive LSTM with a Gaussian or negative
//!   binomial likelihood, sampled trajectory by trajectory.
//! * [`models::nbeats`]: doubly residual stacks of fully connected blocks
//!   with learned basis expansions.
//! * [`models::deeptcn`]: a dilated causal convolution encoder and a
//!   covariate-conditioned decoder that emits every horizon at once.
//!
//! Everything runs on the small autodiff engine in [`numcore`].

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod models;
pub mod numcore;
pub mod synth;
pub mod train;

pub use data::{Column, NormKind, NormalizationSpec, SeriesTable, Target, WindowSample};
pub use error::{DataError, ModelError, NumError};
pub use models::{AnyModel, ForecastOptions, ForecastResult, Forecaster, ModelKind, ModelSpec};
pub use numcore::{Tape, Tensor, Var};
