//! Mixture-representation regression for categorical covariates subject to
//! misclassification.
//!
//! When a categorical covariate `V` is observed only through a noisy copy
//! `V*`, the regression of `Y` on `V*` is a finite mixture whose weights are
//! the reclassification probabilities `P(V = j | V* = k)`. This crate builds
//! that likelihood and estimates it by EM and by Metropolis-within-Gibbs
//! MCMC, evaluates the asymptotic efficiency cost of the misclassification,
//! and ships a simulation laboratory for scenario studies.

pub mod efficiency;
pub mod em;
pub mod error;
pub mod mcmc;
pub mod model;
pub mod quadrature;
pub mod simlab;

pub use error::{Error, Result};
pub use model::{
    component_logpdf, derive_classification, derive_reclassification, gating_probabilities,
    mixture_loglik, ClassificationMatrix, Dataset, FamilyKind, GatingSpec, Link, LogitRow,
    ModelSpec, Nuisance, ReclassificationMatrix, ResponseFamily, Theta,
};
