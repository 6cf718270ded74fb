//! Online recursive editing of a toy multimodal network.
//!
//! Edits are written into a frozen orthonormal low-rank basis per module and
//! preconditioned by a recursively maintained inverse locality statistic.
//! The crate also carries the reference editors, a synthetic edit-stream
//! harness, interference diagnostics and per-edit cost measurement.

pub mod baselines;
pub mod bench;
pub mod checkpoint;
pub mod diagnostics;
pub mod editor;
pub mod error;
pub mod experiment;
pub mod numerics;
pub mod oracle;
pub mod plot;
pub mod stream;
pub mod toymodel;

pub use error::{Error, Result};
