//! File formats, reports and the command-line front end of the gaitformer
//! VGRF classifier. The numerical work lives in [`gaitformer_core`].

pub mod cli;
pub mod config;
pub mod error;
pub mod modelfile;
pub mod report;
pub mod segstore;
pub mod stats;
pub mod walkfile;

pub use error::{Error, Result};
pub use gaitformer_core as core;
