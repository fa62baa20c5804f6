//! Reverse-mode automatic differentiation over dense row-major matrices,
//! generic over `f32` / `f64`, with an Adam optimizer and a
//! finite-difference checker.

pub mod check;
pub mod graph;
pub mod optim;
pub mod params;
pub mod real;
pub mod tensor;

pub use graph::{Graph, NodeGrads, Var};
pub use optim::{Adam, AdamConfig, LrSchedule};
pub use params::{Grads, ParamId, ParamMask, ParamStore};
pub use real::Real;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum AutogradError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
}

pub type Result<T> = std::result::Result<T, AutogradError>;
