//! Multi-task neural processes over 1-D function families.
//!
//! The crate is organized bottom-up:
//!
//! - [`autodiff`]: reverse-mode differentiation tape, tensor ops, parameter
//!   store, Adam, checkpoints.
//! - [`datasets`]: synthetic curve families, the weather table, context
//!   masking.
//! - [`models`]: the single-task, joint-task and multi-task model families
//!   plus their ablation variants.
//! - [`objective`]: evidence lower bounds, learning-rate and beta schedules,
//!   the training loop.
//! - [`evaluation`]: Monte-Carlo prediction, metrics, transfer probes, and
//!   stochastic-process checks.

pub mod autodiff;
pub mod datasets;
pub mod evaluation;
pub mod models;
pub mod objective;

pub use autodiff::{Graph, Real, Tensor, Var};
pub use models::{Model, ModelVariant};
