//! Scenario files, simulation runs and plots for collaborative
//! barrier-function experiments. The `ccbf` binary is a thin shell over
//! this library.

pub mod config;
pub mod error;
pub mod plot;
pub mod run;

pub use error::CliError;
