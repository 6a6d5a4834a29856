//! The encoder-decoder disparity network, its parameters, and checkpoints.

pub mod checkpoint;
mod model;
mod spec;

pub use checkpoint::{Checkpoint, CheckpointMeta, LoadedCheckpoint};
pub use model::{
    Arch, BnLayer, LayerParams, NetworkParams, ParamCounts, StreamOutput, StreamStats,
};
pub use spec::{LayerDesc, LayerKind, LayerSpec, POOLS};
