//! Command implementations for the `ymwml` binary.

pub mod config;
pub mod error;
pub mod predict;
pub mod train;

pub use config::{CrScope, TrainConfig};
pub use error::CliError;
pub mod checks;
pub mod eval;
pub mod gen;
pub mod inspect;
