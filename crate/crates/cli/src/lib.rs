//! Command-line front end: experiment manifests, the on-disk results
//! store, the staged runner, and report generation.

pub mod manifest;
pub mod report;
pub mod runner;
pub mod store;
