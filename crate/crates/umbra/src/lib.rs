//! File formats, image I/O and the command-line front end for
//! [`umbra_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod image;
pub mod pathfile;
pub mod pnm;
pub mod report;
pub mod viz;

pub use error::{Error, Result};
