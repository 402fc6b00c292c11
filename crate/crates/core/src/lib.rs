//! Maximum-likelihood optimization with robust-variance scoring.
//!
//! The crate provides:
//!
//! * a likelihood-problem contract with centered-difference scores and
//!   Hessians ([`likelihood`]),
//! * the scoring matrix `G = sum U_i U_i' - eta/n U U'` with its
//!   positive-definiteness safeguards ([`scoring`]),
//! * RVS and Marquardt optimizers driven by the scaled score-test stopping
//!   criterion `C_k` ([`optim`]),
//! * post-fit variance estimation, sandwich inference, score-test confidence
//!   ellipsoids and early-stopping conservative regions ([`inference`]),
//! * longitudinal linear mixed models with left-censored responses, their
//!   exact likelihoods via a deterministic quasi-Monte Carlo multivariate
//!   normal CDF, plus small analytic oracle models ([`models`]).

pub mod error;
pub mod inference;
pub mod likelihood;
pub mod linalg;
pub mod models;
pub mod optim;
pub mod scoring;
pub mod special;

pub use error::{Error, Result};
