//! Synthetic stereo data, netpbm IO and resizing.

pub mod dataset;
pub mod pnm;
mod resize;
pub mod synth;

pub use dataset::{generate_dataset, sample_seed, Dataset, DatasetSpec, Manifest};
pub use pnm::{load_disparity, load_image, save_disparity, save_image};
pub use resize::resize_bilinear;
pub use synth::{
    batched, generate_sample, interior_columns, DisparityKind, StereoSample, SynthParams,
};
