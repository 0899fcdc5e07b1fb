//! Dense f64 row-major matrices with the handful of operations the rest of
//! the stack needs: multiply, transpose, Frobenius norm, and a deterministic
//! singular value decomposition.

mod matrix;
mod svd;

pub use matrix::Matrix;
pub use svd::{recompose, svd, truncate, SvdFactorization};

use thiserror::Error;

/// Errors from dense linear algebra.
#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("dimension mismatch: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    DimensionMismatch {
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    BadDataLength { len: usize, rows: usize, cols: usize },
    #[error("matrix contains a non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("component range {lo}..{hi} is invalid for {k} singular values")]
    InvalidComponentRange { lo: usize, hi: usize, k: usize },
    #[error(
        "jacobi svd did not converge after {sweeps} sweeps \
         (largest off-diagonal residual {residual:.3e})"
    )]
    SvdDidNotConverge { sweeps: usize, residual: f64 },
}
