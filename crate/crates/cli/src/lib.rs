//! Configuration, orchestration and output plumbing behind the `more` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
