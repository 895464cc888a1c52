//! Mixed attention network for hyperspectral image denoising.
//!
//! Feature tensors use the `(B, C, S, H, W)` layout: batch, feature channel,
//! spectral band, height, width. Hyperspectral cubes are band-major
//! `(S, H, W)` arrays in `[0, 1]`.

pub mod asc;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod hsidata;
pub mod kv;
pub mod metrics;
pub mod mhrsa;
pub mod network;
pub mod noise;
mod linalg;
pub mod ops;
pub mod params;
pub mod profile;
pub mod psca;
pub mod real;
pub mod suite;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use gradcheck::{gradcheck, gradcheck_at, GradcheckReport, GRADCHECK_EPS};
pub use ops::{Activation, Conv3dGeometry, Direction};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
