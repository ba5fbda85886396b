//! Minimal reverse-mode differentiation over dense `f64` matrices.

mod params;
mod tape;
mod tensor;

pub use params::{AdamConfig, Gradients, ParamId, ParamStore, Parameter};
pub use tape::{Segment, Tape, Var};
pub use tensor::Tensor;
