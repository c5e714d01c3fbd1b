//! Dense 64-bit numerics: tensors, a reverse-mode gradient tape, a symmetric
//! eigensolver, and the Adam optimizer.
//!
//! Everything here uses fixed summation orders, so repeated evaluations with
//! identical inputs are bitwise identical.

mod adam;
mod check;
mod eig;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use check::{evaluate_with_gradients, finite_diff_check, relative_error};
pub use eig::symmetric_eig;
pub use tape::{rodrigues, Gradients, Tape, VarId};
pub use tensor::{matmul, Tensor};

use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("matrix is not symmetric (max |A - A^T| = {asym:e})")]
    NotSymmetric { asym: f64 },
    #[error("matrix of size {n} exceeds the eigensolver cap of {max}")]
    EigSizeBound { n: usize, max: usize },
    #[error("eigensolver failed to converge for eigenvalue {index}")]
    EigNoConvergence { index: usize },
    #[error("{0}")]
    Contract(String),
}
