//! Small neural-network toolkit: a batched reverse-mode tape, dense MLPs with
//! Mish activations, Adam, cosine learning-rate decay, EMA target updates and a
//! flat binary parameter format.
//!
//! All tensors are row-major `f64` matrices (`ndarray::Array2`). A batch is a
//! matrix with one sample per row; scalars are `1 x 1` matrices.

mod checkpoint;
mod error;
mod mlp;
mod optim;
mod tape;

pub use checkpoint::{decode_params, encode_params, read_params, write_params, PARAM_MAGIC, PARAM_VERSION};
pub use error::{NnError, Result};
pub use mlp::{
    bind_params, collect_gradients, grad, mish, mish_derivative, mlp_forward, Activation, BoundLinear, Gradients,
    Linear, MlpParams, ParamSet,
};
pub use optim::{adam_step, cosine_lr, ema_update, AdamState};
pub use tape::{Grads, Tape, Var};
