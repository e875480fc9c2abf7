//! Reverse-mode automatic differentiation and the neural-net substrate.
//!
//! Training builds one [`Graph`] per family in a batch, runs the forward
//! pass through the ops defined here, and calls [`Graph::backward`] to get
//! gradients with respect to every parameter leaf. Values are generic over
//! [`Real`] so the same code path runs fp32 in training and fp64 inside the
//! finite-difference gradient checks.

mod checkpoint;
mod gradcheck;
mod graph;
mod kernels;
mod nn;
mod params;
mod real;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CheckpointMeta};
pub use gradcheck::{check_gradients, fd_gradient, GradCheckReport, DEFAULT_EPS};
pub use graph::{Gradients, Graph, GraphError, Var};
pub use nn::{
    attention_stack, cross_attention_stack, mlp_forward, multi_head_attention, pma_pool, pool,
    register_attention_stack, register_cross_attention_stack, register_mlp, register_pool,
    AttnStackSpec, MlpSpec, PoolMode,
};
pub use params::{
    adam_step, clip_global_norm, init_linear, init_uniform_fanin, AdamState, BoundParams,
    OptimError, ParamSet,
};
pub use real::Real;
pub use tensor::{Tensor, TensorError};
