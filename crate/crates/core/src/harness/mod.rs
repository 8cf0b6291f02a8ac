//! Experiment configuration, checkpoints, metrics and sweeps.

mod checkpoint;
mod config;
mod experiment;
pub mod hexfloat;
mod sweeps;

pub use checkpoint::{checkpoint_from_str, checkpoint_to_string, load_checkpoint, save_checkpoint, SCHEMA_VERSION};
pub use config::*;
pub use experiment::*;
pub use sweeps::*;
