//! Configuration, file formats and command-line plumbing around
//! [`svmix_core`].

pub mod analyze;
pub mod config;
pub mod io;
pub mod run;
pub mod sweep;
pub mod verify;

pub use config::{ConfigError, Preset, RunConfig};
