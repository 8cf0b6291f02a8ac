pub mod autodiff;
pub mod error;
pub mod exec;
pub mod funn;
pub mod harness;
pub mod physics;
pub mod problems;
pub mod prune;
pub mod train;

pub use error::{Error, Result};
