//! Learned cardinality estimation for single-table conjunctive queries.
//!
//! One autoregressive density model answers selectivity queries over a
//! relation. It trains from two signals at once: the raw tuples (maximum
//! likelihood) and, when available, labeled queries whose true cardinalities
//! supervise the estimates end to end through a differentiable progressive
//! sampler.
//!
//! Module map:
//! - [`autodiff`] — tape-based reverse-mode engine the losses are built on
//! - [`data`] — dictionary encoding of tables and the binary input encoding
//! - [`model`] — the masked residual autoregressive network
//! - [`workload`] — query representation, generation, and true cardinalities
//! - [`sampler`] — exhaustive / uniform / progressive estimators, including
//!   the differentiable variant used for query-driven training
//! - [`trainer`] — Adam, the hybrid loss loop, and incremental refinement
//! - [`eval`] — q-error reports over labeled workloads

pub mod autodiff;
pub mod data;
pub mod error;
pub mod model;
pub mod eval;
pub mod sampler;
pub mod trainer;
pub mod workload;

pub use error::{Error, Result};
