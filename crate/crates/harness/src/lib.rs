//! Synthetic scenarios, file formats, desk-scale metrics and self-checks
//! around `vql_core`.

pub mod error;
pub mod io;
pub mod metrics;
pub mod scenario;
pub mod selfcheck;

pub use error::{Error, Result};
