//! Probabilistic contrastive PCA and its special cases.
//!
//! The closed-form estimators live in [`estimators`], γ diagnostics in
//! [`spectral`], masked-data fitting in [`missing`], generalized-Bayes
//! sampling in [`gibbs`] and the simulation protocols in [`evalkit`].

// NaN must fail positivity checks
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod estimators;
pub mod evalkit;
pub mod gibbs;
pub mod linalg;
pub mod missing;
pub mod sampling;
pub mod spectral;

pub use dataset::{ContrastivePair, DataMatrix, ObservationMask};
pub use error::{PcpcaError, Result};
pub use estimators::{PcpcaModel, Subspace};
