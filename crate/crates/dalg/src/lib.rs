//! Files and commands around `dalg-core`: binary checkpoint and index
//! formats, JSON documents, netpbm images and the `dalg` CLI.

pub mod cli;
pub mod commands;
pub mod error;
pub mod files;
pub mod formats;

pub use error::{Error, FormatError, Result};
