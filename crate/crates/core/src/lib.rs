//! Class-incremental learning with a frozen vision transformer, task-level
//! prompt prediction and feature translation.

pub mod backbone;
pub(crate) mod binio;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod head;
pub mod numeric;
pub mod pipeline;
pub mod prompting;
pub mod translation;

pub use error::{Error, Result};
