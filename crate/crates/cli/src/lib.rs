//! Pipeline orchestration for `pirtune`: configuration, content-addressed
//! run directories with checksummed manifests, and one function per stage.

pub mod config;
pub mod error;
pub mod layout;
pub mod stages;

pub use config::RunConfig;
pub use error::{CliError, Result};
pub use stages::{analyze, Pipeline, Stage};
