//! Reconstruction quality (SSIM), disparity error, and a block-matching
//! baseline.

mod block_match;
mod evaluate;
pub mod ssim;

pub use block_match::block_match;
pub use evaluate::{
    evaluate, evaluate_samples, interior_abs_error, reconstruct_left, reconstruct_right,
    score_sample, EvalReport, Method, SampleScore, SkippedSample,
};
pub use ssim::ssim;
