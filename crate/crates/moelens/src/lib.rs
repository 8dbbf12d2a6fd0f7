//! File format, reports and command-line front end for `moelens-core`.

pub mod cli;
pub mod format;
pub mod manifest;
pub mod report;

pub use moelens_core as core;
