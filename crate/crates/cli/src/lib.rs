//! Staged command-line pipeline over `augsens-core`.

pub mod commands;
pub mod config;
pub mod error;
pub mod store;

pub use commands::{Outcome, Session, STAGES};
pub use config::ExperimentConfig;
pub use error::{CliError, Result};
pub use store::{Manifest, Store};
