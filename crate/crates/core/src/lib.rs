//! Depth-supervised face presentation attack detection: differentiable kernels, a
//! single-frame backbone with spatial-gradient blocks, a temporal propagation module,
//! toy-scale training, evaluation metrics, and a simulator for the motion geometry of
//! live faces and planar attacks.

pub mod backbone;
pub mod checks;
pub mod cli;
pub mod depth;
pub mod error;
pub mod geometry;
pub mod gradient;
mod kernels;
pub mod losses;
pub mod metrics;
pub mod ops;
pub mod params;
pub mod pgm;
pub mod stpm;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use kernels::Padding;
pub use tensor::{Shape, Tensor};
