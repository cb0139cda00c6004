//! Learning multi-class classifiers from stochastic labels.
//!
//! An annotator is shown a small random subset of the `K` class labels and
//! either picks the true label out of it or answers "None". This crate
//! simulates that annotation process, trains scorers with an unbiased risk
//! estimator built on the resulting data, and ships exact enumeration oracles
//! that check the estimator's identities on finite distributions.
//!
//! Labels are 1-based throughout (`1..=K`); the "None" outcome is encoded as
//! `K + 1` wherever a numeric selector code is needed.

pub mod datasets;
pub mod error;
pub mod estimator;
pub mod exec;
pub mod label_mech;
pub mod loss;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Exec;
