//! A small f64 numerics kernel with hand-written backward passes.
//!
//! The graph is fixed (embeddings -> head -> softmax -> KL), so every layer
//! exposes a `forward` that returns a cache and a `backward` that consumes it
//! and accumulates into the layer's [`Parameter`] gradients.

mod gradcheck;
mod init;
mod linear;
mod loss;
mod lstm;
mod optim;
mod param;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use init::{init_params, xavier_uniform};
pub use linear::{linear, Linear};
pub use loss::{kl_grad_logits, kl_loss, softmax2, PROB_FLOOR};
pub use lstm::{
    bilstm_backward, bilstm_encode, lstm_cell, lstm_cell_backward, BiLstmCache, BiLstmStates, CellCache,
    LstmParams,
};
pub use optim::{clip_grad_norm, sgd_step, Optimizer, OptimizerKind};
pub use param::{ParamMut, Parameter, Parameterized};
pub(crate) use param::{prefixed as param_prefixed, prefixed_ref as param_prefixed_ref};
