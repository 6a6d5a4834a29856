//! Self-supervised stereo depth estimation.
//!
//! An encoder-decoder network predicts a per-pixel horizontal disparity map
//! from a single image. Training needs no depth labels: the predicted
//! disparity warps the opposite stereo view onto the input view, and the L1
//! photometric error of that reconstruction is minimised. The Siamese variant
//! runs the same weights on both views and adds a left-right disparity
//! consistency term.
//!
//! Everything is built on a small tape-based reverse-mode autodiff engine
//! ([`tensor::Tape`]) over dense NCHW tensors.

pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod ops;
pub mod optim;
pub mod parallel;
pub mod param;
pub mod tensor;
pub mod train;
pub mod warp;

pub use error::{Error, Result};
pub use param::{ParamId, ParamStore};
pub use tensor::{Scalar, Tape, Tensor, Var};
