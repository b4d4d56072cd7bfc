//! Dense matrices and the two factorizations every adapter is built on:
//! column-pivoted Householder QR and one-sided Jacobi SVD.

mod matrix;
mod qr;
mod svd;

pub use matrix::Matrix;
pub use qr::{qr_pivoted, reconstruct, PivotedQr};
pub use svd::{svd, Svd, MAX_SWEEPS, ORTHOGONALITY_TOL};
