//! End-to-end fit of one moment model: prior construction, posterior mode,
//! MCMC and marginal likelihood.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{split_train, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::evidence::{chib_jeliazkov, derive_seed, normalize_evidence, prior_feasibility_mass, EvidenceEstimate};
use crate::freq::{two_step_gmm, GmmFit};
use crate::moments::{bits, MomentModel};
use crate::etel::ridge_dual_value;
use crate::moments::ParamVector;
use crate::posterior::{bfgs, find_mode, param_names, run_mh, Chain, EtelTarget, MhConfig, ModeConfig, Target};
use crate::priors::{build_training_prior, PriorSpec};

fn default_fraction() -> f64 {
    0.15
}

fn default_inflate() -> f64 {
    2.0
}

fn default_df() -> f64 {
    2.5
}

/// How the prior of each model is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorRecipe {
    /// Student-t priors from GMM on a random training subsample; the
    /// remaining observations form the estimation sample.
    Training {
        #[serde(default = "default_fraction")]
        train_fraction: f64,
        /// Defaults to the MCMC seed.
        #[serde(default)]
        split_seed: Option<u64>,
        #[serde(default = "default_inflate")]
        inflate: f64,
        #[serde(default = "default_df")]
        df: f64,
    },
    /// Student-t priors from GMM on the full sample, which is also used for
    /// estimation.
    FullSample {
        #[serde(default = "default_inflate")]
        inflate: f64,
        #[serde(default = "default_df")]
        df: f64,
    },
    /// User-supplied priors keyed by model label (`base`, `extended`,
    /// `endogenous:x1`, ...) or by mask bits (`"10"`).
    Explicit { priors: BTreeMap<String, PriorSpec> },
}

impl Default for PriorRecipe {
    fn default() -> Self {
        PriorRecipe::Training {
            train_fraction: default_fraction(),
            split_seed: None,
            inflate: default_inflate(),
            df: default_df(),
        }
    }
}

impl PriorRecipe {
    pub fn validate(&self) -> Result<()> {
        match self {
            PriorRecipe::Training { train_fraction, inflate, df, .. } => {
                if !(*train_fraction > 0.0 && *train_fraction < 1.0) {
                    return Err(Error::Config(format!("train_fraction must be in (0, 1), got {train_fraction}")));
                }
                check_knobs(*inflate, *df)
            }
            PriorRecipe::FullSample { inflate, df } => check_knobs(*inflate, *df),
            PriorRecipe::Explicit { priors } => {
                if priors.is_empty() {
                    return Err(Error::Config("explicit prior recipe lists no priors".into()));
                }
                Ok(())
            }
        }
    }
}

fn check_knobs(inflate: f64, df: f64) -> Result<()> {
    if inflate > 0.0 && df > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("prior inflate and df must be positive, got {inflate}, {df}")))
    }
}

/// Sampler and evidence settings for a fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub mh: MhConfig,
    /// Proposal draws for the ordinate denominator; defaults to `mh.n_draws`.
    pub j_draws: Option<usize>,
    /// Renormalize the prior to the feasible set.
    pub normalized: bool,
    pub feasibility_draws: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            mh: MhConfig::default(),
            j_draws: None,
            normalized: false,
            feasibility_draws: 1000,
        }
    }
}

impl FitOptions {
    pub fn quick(seed: u64) -> Self {
        FitOptions {
            mh: MhConfig::quick().with_seed(seed),
            ..FitOptions::default()
        }
    }
}

/// Everything produced by fitting one model.
#[derive(Debug, Clone)]
pub struct ModelFit {
    pub model: MomentModel,
    pub prior: PriorSpec,
    pub start: Vec<f64>,
    /// Two-step GMM on the estimation sample, when it succeeded.
    pub gmm: Option<GmmFit>,
    pub chain: Chain,
    pub evidence: EvidenceEstimate,
    pub n_estimation: usize,
    pub n_training: usize,
}

fn model_code(model: &MomentModel) -> u64 {
    let mut code = 1u64;
    for &b in model.v_mask.iter().chain(model.coef_mask.iter()) {
        code = code << 1 | b as u64;
    }
    code
}

/// Prior and estimation sample for `model` under `recipe`.
pub fn prepare_prior(ds: &Dataset, model: &MomentModel, recipe: &PriorRecipe, seed: u64) -> Result<(PriorSpec, Dataset, usize)> {
    recipe.validate()?;
    match recipe {
        PriorRecipe::Training {
            train_fraction,
            split_seed,
            inflate,
            df,
        } => {
            let spec = SplitSpec {
                train_fraction: *train_fraction,
                seed: split_seed.unwrap_or(seed),
            };
            let (train, est) = split_train(ds, &spec)?;
            let prior = build_training_prior(&train, model, *inflate, *df)?;
            Ok((prior, est, train.n()))
        }
        PriorRecipe::FullSample { inflate, df } => Ok((build_training_prior(ds, model, *inflate, *df)?, ds.clone(), 0)),
        PriorRecipe::Explicit { priors } => {
            let prior = priors
                .get(&model.label())
                .or_else(|| priors.get(&model.mask_bits()))
                .or_else(|| priors.get(&format!("{}/{}", model.mask_bits(), bits(&model.coef_mask))))
                .ok_or_else(|| Error::Config(format!("no explicit prior for model {}", model.label())))?
                .clone();
            prior.check_model(model).map_err(|e| Error::Config(e.to_string()))?;
            Ok((prior, ds.clone(), 0))
        }
    }
}

/// Ridge-regularized dual value as a function of the parameters; its maximizer
/// lies inside the feasible set whenever that set is nonempty.
struct HullDepth<'a> {
    target: &'a EtelTarget,
    mu: f64,
}

impl Target for HullDepth<'_> {
    fn dim(&self) -> usize {
        self.target.dim()
    }

    fn log_likelihood(&self, x: &[f64]) -> Option<f64> {
        let params = ParamVector::from_flat(self.target.model(), x).ok()?;
        let g = self.target.evaluator().matrix(&params);
        Some(ridge_dual_value(&g, self.mu))
    }

    fn log_prior(&self, _: &[f64]) -> f64 {
        0.0
    }
}

/// Climbs the hull depth from `from` under a decreasing ridge and returns the
/// first feasible point reached.
pub fn seek_feasible(target: &EtelTarget, from: &[f64], cfg: &ModeConfig) -> Option<Vec<f64>> {
    let params = ParamVector::from_flat(target.model(), from).ok()?;
    let g = target.evaluator().matrix(&params);
    let scale = g.norm_squared() / g.nrows() as f64;
    if !(scale > 0.0 && scale.is_finite()) {
        return None;
    }
    let mut x = from.to_vec();
    for k in [1e-3, 1e-5, 1e-7, 1e-9] {
        let depth = HullDepth { target, mu: k * scale };
        x = bfgs(&depth, &x, cfg).0;
        if target.log_posterior(&x).is_finite() {
            return Some(x);
        }
    }
    None
}

/// Fits one model: prior, GMM start, posterior mode, tailored MH chain and
/// Chib-Jeliazkov evidence.
pub fn fit_model(ds: &Dataset, model: &MomentModel, recipe: &PriorRecipe, opts: &FitOptions) -> Result<ModelFit> {
    model.check(ds)?;
    opts.mh.validate()?;
    let (prior, est, n_training) = prepare_prior(ds, model, recipe, opts.mh.seed)?;
    let target = EtelTarget::new(model, &est, prior.clone(), opts.mh.tilt)?;

    let gmm = two_step_gmm(model, &est).ok();
    let candidates: Vec<Vec<f64>> = gmm
        .iter()
        .map(|g| g.estimate.to_flat())
        .chain(std::iter::once(prior.locations()))
        .collect();
    let start = match candidates.iter().find(|c| target.log_posterior(c).is_finite()) {
        Some(c) => c.clone(),
        None => seek_feasible(&target, &candidates[0], &opts.mh.mode).ok_or_else(|| {
            Error::Initialization("no feasible starting point: the GMM estimate, the prior location and the hull search all failed".into())
        })?,
    };

    let mode = find_mode(&target, &start, &opts.mh.mode)?;
    let seed = derive_seed(&[opts.mh.seed, model_code(model)]);
    let mh = opts.mh.with_seed(seed);
    let chain = run_mh(&target, &mode, param_names(model, &est), &mh)?;
    let mut evidence = chib_jeliazkov(&target, &chain, opts.j_draws.unwrap_or(mh.n_draws))?;
    if opts.normalized {
        let mass = prior_feasibility_mass(&target, &prior, opts.feasibility_draws, seed)?;
        evidence = normalize_evidence(evidence, mass)?;
    }
    Ok(ModelFit {
        model: model.clone(),
        prior,
        start,
        gmm,
        chain,
        evidence,
        n_estimation: est.n(),
        n_training,
    })
}
