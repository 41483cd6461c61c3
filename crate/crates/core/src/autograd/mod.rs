//! Dense tensors with tape-based reverse-mode differentiation.

mod checkpoint;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, write_checkpoint,
};
pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport};
pub use params::{uniform, xavier, Bound, ParamId, ParamStore};
pub use tape::{AttentionMask, BackwardFault, Gradients, Tape, Var, LAYER_NORM_EPS, LOG_CLAMP, MASKED_SCORE};
pub use tensor::Tensor;
