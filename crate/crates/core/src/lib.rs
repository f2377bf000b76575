//! Monocular 3D visual grounding mechanics at desk scale: a small reverse-mode
//! autodiff engine, attention layers, the dimension-decoupled text module,
//! lexical certainty masking, rotated 3D IoU, grounding losses, the
//! accuracy protocol, file formats and a synthetic training pipeline.

// `!(x > 0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod autodiff;
pub mod checks;
pub mod d2m;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod lexical;
pub mod losses;
pub mod params;
pub mod render;
pub mod scalar;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type TensorF64 = tensor::Tensor<f64>;
pub type TensorF32 = tensor::Tensor<f32>;
pub type TapeF64 = autodiff::Tape<f64>;
pub type Box3DF64 = geometry::Box3D<f64>;
pub type Box2DF64 = geometry::Box2D<f64>;
pub type CameraF64 = geometry::CameraCalib<f64>;
