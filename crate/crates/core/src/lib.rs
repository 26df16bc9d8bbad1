//! Low-rank adapter training with per-step refactoring of the factor pair.
//!
//! Start with [`harness::run`] for whole training runs, [`optim::Stepper`]
//! for single steps, or [`refactor::optimal_s`] for the refactoring alone.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod optim;
pub mod problems;
pub mod props;
pub mod refactor;
pub mod rng;
