//! Dense tensors, a seeded counter-based RNG, a small reverse-mode tape and
//! the finite-difference / linear-algebra oracles used to verify it.

mod linalg;
mod ops;
mod params;
pub mod ostn;
mod rng;
mod scalar;
mod tape;
mod tensor;

pub mod gradcheck;

pub use linalg::{frobenius_norm, matrix_sqrt_psd, matmul_f64};
pub use ops::{layer_norm, softmax};
pub use params::{Binder, ParamId, ParamStore};
pub use rng::{fnv1a, Rng};
pub use scalar::Scalar;
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape {shape:?} holds {expected} values but {got} were supplied")]
    ShapeData {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("zero-sized extent in shape {0:?}")]
    ZeroExtent(Vec<usize>),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("objective must be a single scalar, got shape {0:?}")]
    NonScalarObjective(Vec<usize>),
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("{0}")]
    Invalid(String),
    #[error("tensor file: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for NumericsError {
    fn from(e: std::io::Error) -> Self {
        NumericsError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, NumericsError>;
