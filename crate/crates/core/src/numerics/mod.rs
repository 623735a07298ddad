//! Differentiable tensor core: values, a recording tape, and seeded randomness.

pub mod rng;
pub mod tape;
pub mod tensor;

pub use rng::SeededRng;
pub use tape::{softmax_rows, softplus_scalar, Gradients, ParamStore, Tape, Var};
pub use tensor::Tensor;
