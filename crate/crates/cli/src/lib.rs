//! Command-line front end: dataset ingestion, experiment running, artifact
//! inspection and image emission. Everything callable in-process so the
//! test suites can exercise the same code paths as the binary.

pub mod commands;
pub mod dataset;
pub mod images;
pub mod synth;
