//! Location-aware upsampling (LaU) for semantic segmentation.
//!
//! The crate provides the sampling kernels (bilinear, PixelShuffle, the
//! integral corner samplers and the offset-driven LaU kernel with its
//! analytic backward pass), the location-aware losses, a small explicitly
//! differentiated segmentation network with an offset-prediction branch, a
//! deterministic synthetic benchmark, and a finite-difference gradient
//! checker.

pub mod config;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod net;
pub mod nn;
pub mod rng;
pub mod samplers;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{LauError, Result};
pub use rng::Rng;
pub use tensor::{nchw_index, LabelMap, Tensor4};
