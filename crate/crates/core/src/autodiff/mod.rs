//! Reverse-mode automatic differentiation over dense f64 matrices.
//!
//! The estimator's training losses are built as flat tapes of matrix ops
//! ([`Tape`]), differentiated with a single reverse sweep. [`gemm`] wraps the
//! dense matrix-product kernel and [`gradcheck`] provides finite-difference
//! validation used throughout the test suite.

pub mod gemm;
pub mod gradcheck;
mod tape;

pub use tape::{NodeId, Tape, Tensor, NEG_INF};
