//! Privacy risk profiling for models trained with differentially private SGD.
//!
//! The crate pairs three views of reconstruction risk for a given privacy
//! budget:
//!
//! * a worst-case bound derived from the Rényi-DP curve of the training
//!   mechanism ([`rero::worst_case_bound`]),
//! * a relaxed bound for an adversary that must decide whether a candidate
//!   is the target ([`rero::relaxed_bound`]),
//! * the empirical success of an analytic imprint-layer gradient inversion
//!   run by a simulated malicious federated server ([`imprint`]).
//!
//! Utility is measured by training desk-scale models on synthetic datasets
//! ([`datagen`], [`trainer`]) and the results are assembled into risk
//! profiles by [`pipeline`] and written out by [`report`].

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod config;
pub mod container;
pub mod datagen;
pub mod error;
pub mod evalrecon;
pub mod imprint;
pub mod numerics;
pub mod pipeline;
pub mod report;
pub mod rero;
mod serde_ext;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{Rng, Tensor};
