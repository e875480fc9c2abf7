//! Training objectives and the training loop.
//!
//! [`elbo`] assembles the per-variant evidence lower bounds as graph
//! scalars, [`schedule`] provides the learning-rate and KL-weight ramps,
//! and [`train`] runs seeded minibatch optimization with tracing and
//! checkpointing.

pub mod elbo;
pub mod schedule;
pub mod train;

pub use elbo::{build_elbo, elbo_mtnp, elbo_np, ElboTerms, LatentDraws};
pub use schedule::{kl_weight, learning_rate, LrDecay, ScheduleError};
pub use train::{
    checkpoint_path, trace_path, train_loop, write_trace, TraceRow, TrainConfig, TrainError,
    TrainOutcome,
};
