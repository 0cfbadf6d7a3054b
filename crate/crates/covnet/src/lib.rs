//! File formats, configuration, parallel cross-validation and the
//! subcommands behind the `covnet` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod fields;
pub mod model_file;
pub mod parallel;

pub use config::{Config, Overrides};
pub use error::{Error, Result};
pub use fields::{read_fields, write_fields};
pub use model_file::{load_model, save_model};
pub use parallel::cross_validate_parallel;
