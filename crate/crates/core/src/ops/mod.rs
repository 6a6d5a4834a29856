//! Network layers: convolution, transposed convolution, 2×2 max
//! pooling/unpooling, batch normalization. ReLU lives on the tape itself
//! ([`crate::Tape::relu`]).

pub mod batchnorm;
pub mod conv;
pub mod pool;

pub use batchnorm::{BatchStats, BnMode, BnSaved, BnStats};
pub use conv::ConvGeom;
pub use pool::PoolIndices;
