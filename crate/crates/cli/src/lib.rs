//! File formats and the `camtraj` command-line driver.

mod app;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fsutil;
pub mod plot;
pub mod raster;
pub mod trajectory;

pub use app::run;
pub use error::{CliError, CliResult, ErrorKind};
