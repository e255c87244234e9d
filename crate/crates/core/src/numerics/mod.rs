//! Tensors, reverse-mode differentiation, parameters and gradient checking.

pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{glorot, Binding, Linear, ParamId, ParamStore};
pub use tape::{softmax_values, Gradients, Tape, Var};
pub use tensor::Tensor;
