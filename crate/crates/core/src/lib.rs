//! Core library for a symmetry-aware siamese abnormality detector.
//!
//! The pieces compose into a pipeline that takes a grayscale image with
//! bilateral landmarks, mirrors it across a fitted symmetry line, warps the
//! mirrored side onto the original with a thin-plate spline, and feeds both
//! through a weight-shared encoder whose fused features drive a pixel-wise
//! abnormality heatmap. Everything runs on CPU with a small reverse-mode
//! autodiff engine; no external ML framework is involved.

pub mod checkpoint;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
