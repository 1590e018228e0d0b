//! Minimal dense-tensor arithmetic with reverse-mode automatic
//! differentiation: matrix products, softmax, layer normalization, GELU,
//! embedding gather, and masked cross entropy — enough for a small
//! transformer, nothing more.

mod param;
mod tape;
mod tensor;

pub mod check;

pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{NodeId, Tape};
pub use tensor::{
    log_softmax_slice, matmul_nn, matmul_nt, matmul_tn, softmax, Real, Tensor,
};

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("{0}")]
    Validation(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}
