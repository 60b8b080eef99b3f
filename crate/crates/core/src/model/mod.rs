//! Architectures, parameters, checkpoint files and the network executor.

pub mod checkpoint;
pub mod exec;

pub mod graph;
pub mod zoo;

pub use checkpoint::{
    init_params, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, Normalization,
};
pub use exec::{apply_running_updates, forward, Network};
pub use graph::{Activation, LayerKind, LayerSpec, ModelGraph, ResidualBlock, Shortcut, Step};
pub use zoo::{build, Arch};
