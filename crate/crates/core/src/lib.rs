//! Semi-supervised estimation of explained variance in linear models.
//!
//! The crate estimates `tau^2 = ||beta||^2` (the signal) and `sigma^2` (the
//! noise) from a labeled sample whose covariates have been whitened, then
//! reduces the variance of the naive U-statistic estimator with
//! zero-estimators whose expectation is known from the covariate law.
//!
//! Typical flow: load a [`LabeledDataset`], estimate or supply a
//! [`CovariateModel`], [`whiten`], build a [`WMatrix`], then call
//! [`naive_tau2`] and one of the improvements in [`zeroest`] or
//! [`bootstrap`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bootstrap;
pub mod data;
pub mod error;
pub mod naive;
pub mod rng;
pub mod simgen;
pub mod stats;
pub mod whitening;
pub mod zeroest;

pub use data::{ColumnRef, LabeledDataset, UnlabeledDataset};
pub use error::{Error, Result};
pub use naive::{naive_tau2, w_matrix, Estimate, Flag, Method, WMatrix};
pub use whitening::{estimate_moments, whiten, whiten_unlabeled, CovariateModel, MomentSource};
pub use zeroest::{SelectionResult, VarSource, ZeroStat};

/// Crate version, stamped into every artifact the CLI writes.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
