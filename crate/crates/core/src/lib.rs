//! Bayesian endogeneity testing for linear instrumental-variable regressions.
//!
//! The likelihood is the exponentially tilted empirical likelihood (ETEL) of a
//! set of linear moment conditions. Posteriors are sampled with a tailored
//! independence Metropolis-Hastings chain, marginal likelihoods are computed
//! with the Chib-Jeliazkov estimator, and endogeneity is decided by comparing
//! models that do or do not free the covariance between the error and each
//! treatment.
//!
//! Module map:
//!
//! - [`data`]: observation storage, CSV ingestion and training splits
//! - [`moments`]: base / extended / partially restricted moment functions
//! - [`etel`]: dual tilting solver and a primal reference solver
//! - [`priors`]: coordinatewise normal and Student-t priors
//! - [`posterior`]: truncated posterior, mode search, tailored MH sampler
//! - [`evidence`]: marginal likelihoods, Bayes factors, model enumeration
//! - [`freq`]: two-step GMM, J statistic and moment selection criteria
//! - [`simulate`]: copula data generating processes and the Monte Carlo harness
//! - [`pipeline`]: prior recipes and the end-to-end fit of one model
//! - [`config`]: JSON run configuration
//! - [`cli`]: command implementations behind the `betel` binary

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod etel;
pub mod evidence;
pub mod freq;
mod linalg;
pub mod moments;
pub mod pipeline;
pub mod posterior;
pub mod priors;
pub mod simulate;

pub use data::{Dataset, Schema, SplitSpec};
pub use error::{Error, Result};
pub use etel::{solve_tilt, TiltConfig, TiltSolution};
pub use evidence::{select_models, test_endogeneity, ComparisonReport, EndogeneityTest, EvidenceEstimate, Verdict};
pub use freq::{two_step_gmm, GmmFit, MscReport};
pub use moments::{MomentModel, ParamVector};
pub use posterior::{Chain, MhConfig};
pub use pipeline::{fit_model, FitOptions, PriorRecipe};
pub use priors::PriorSpec;
pub use simulate::{generate_dataset, DgpConfig};

pub use nalgebra;
