//! IO, file formats and the command line for RET-CLIP.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod imageio;
pub mod logs;
pub mod manifest;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use config::RunConfig;
pub use error::{CliError, IoError};
