//! File formats, run configuration, manifests and the command-line front end
//! for [`oilad_core`].

pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod manifest;
pub mod pipeline;
pub mod report;

pub use config::RunConfig;
pub use error::{Error, Result};
