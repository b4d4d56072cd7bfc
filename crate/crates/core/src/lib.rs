//! Low-rank adaptation of frozen weight matrices through a column-pivoted
//! QR basis, with LoRA, SVD-LoRA and full fine-tuning baselines and a small
//! transformer encoder to run them on.
//!
//! The factorization and adapter layers are generic over [`Scalar`]
//! (`f32` or `f64`); the encoder, trainer and file formats work in `f64`.
//! The aliases below name the `f64` instantiations.

pub mod adapters;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod rank;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix = linalg::Matrix<f64>;
pub type Matrix32 = linalg::Matrix<f32>;
pub type PivotedQr = linalg::PivotedQr<f64>;
pub type Svd = linalg::Svd<f64>;
pub type QrLoraAdapter = adapters::QrLoraAdapter<f64>;
pub type LoraAdapter = adapters::LoraAdapter<f64>;
pub type FullWeight = adapters::FullWeight<f64>;
pub type AnyAdapter = adapters::AnyAdapter<f64>;
