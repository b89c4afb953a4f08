//! Tensors, the computation tape, and finite-difference gradient verification.

mod float;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use float::{DType, Float};
pub use gradcheck::{grad_check, FragmentEval, GradCheckReport};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
