//! Dense tensors, reverse-mode differentiation, and the attention and
//! normalisation operators built on them.

pub mod checkpoint;
pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_difference_grad, relative_error};
pub use ops::{attention, causal_mask, cross_attention, ffn, layer_norm, linear, softmax};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
