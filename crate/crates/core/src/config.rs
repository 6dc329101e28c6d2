//! JSON run configuration shared by all commands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_csv, Dataset, Schema};
use crate::error::{Error, Result};
use crate::moments::{all_masks, parse_mask, MomentModel};
use crate::pipeline::{FitOptions, PriorRecipe};
use crate::posterior::MhConfig;
use crate::simulate::{generate_dataset, DgpConfig, McGrid};

/// Where the observations come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// A CSV file with a header row, mapped through `schema`.
    Csv { path: PathBuf, schema: Schema },
    Simulate(DgpConfig),
}

/// A candidate model: which treatments are allowed to be endogenous and,
/// optionally, which treatment coefficients are free (`"1"`) or fixed at
/// zero (`"0"`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Mask(String),
    Full { mask: String, coef_mask: Option<String> },
}

impl ModelSpec {
    pub fn build(&self, ds: &Dataset) -> Result<MomentModel> {
        let (mask, coef) = match self {
            ModelSpec::Mask(m) => (m.as_str(), None),
            ModelSpec::Full { mask, coef_mask } => (mask.as_str(), coef_mask.as_deref()),
        };
        let v = parse_mask(mask).map_err(|e| Error::Config(e.to_string()))?;
        let c = match coef {
            Some(c) => parse_mask(c).map_err(|e| Error::Config(e.to_string()))?,
            None => vec![true; ds.dx()],
        };
        MomentModel::with_coef_mask(ds, v, c).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Evidence settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvidenceConfig {
    /// Renormalize each prior to the feasible set before comparing models.
    pub normalized: bool,
    /// Prior draws used to estimate the feasible prior mass.
    pub feasibility_draws: usize,
    /// Proposal draws in the ordinate denominator; defaults to the chain length.
    pub j_draws: Option<usize>,
}

impl Default for EvidenceConfig {
    fn default() -> Self {
        EvidenceConfig {
            normalized: false,
            feasibility_draws: 1000,
            j_draws: None,
        }
    }
}

/// Everything a command needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataSource,
    /// Candidate models for `select` (default: all `2^dx` masks) and the
    /// first entry for `fit` (default: the extended model).
    #[serde(default)]
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub prior: PriorRecipe,
    #[serde(default)]
    pub mh: MhConfig,
    #[serde(default)]
    pub evidence: EvidenceConfig,
    /// Monte Carlo grid for `mc`.
    #[serde(default)]
    pub grid: Option<McGrid>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("invalid configuration: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read configuration {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks knob ranges and that referenced files exist.
    pub fn validate(&self) -> Result<()> {
        match &self.data {
            DataSource::Csv { path, .. } => {
                if !path.is_file() {
                    return Err(Error::Config(format!("dataset {} does not exist", path.display())));
                }
            }
            DataSource::Simulate(cfg) => cfg.validate()?,
        }
        self.prior.validate()?;
        self.mh.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.evidence.normalized && self.evidence.feasibility_draws < 100 {
            return Err(Error::Config("feasibility_draws must be at least 100".into()));
        }
        if self.evidence.j_draws == Some(0) {
            return Err(Error::Config("j_draws must be positive".into()));
        }
        if let Some(g) = &self.grid {
            g.validate()?;
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.data {
            DataSource::Csv { path, schema } => {
                if !path.is_file() {
                    return Err(Error::Config(format!("dataset {} does not exist", path.display())));
                }
                load_csv(path, schema)
            }
            DataSource::Simulate(cfg) => generate_dataset(cfg),
        }
    }

    /// Candidate models; all endogeneity masks when none are listed.
    pub fn candidate_models(&self, ds: &Dataset) -> Result<Vec<MomentModel>> {
        if self.models.is_empty() {
            return all_masks(ds.dx())
                .into_iter()
                .map(|m| MomentModel::for_dataset(ds, m))
                .collect();
        }
        self.models.iter().map(|m| m.build(ds)).collect()
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            mh: self.mh,
            j_draws: self.evidence.j_draws,
            normalized: self.evidence.normalized,
            feasibility_draws: self.evidence.feasibility_draws,
        }
    }

    /// Overrides the sampler seed and, for simulated data without an explicit
    /// seed, the simulation seed too.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.mh.seed = seed;
        if let DataSource::Simulate(cfg) = &mut self.data {
            cfg.seed = seed;
        }
        if let Some(g) = &mut self.grid {
            g.base_seed = seed;
        }
        self
    }

    /// Short chains for smoke runs.
    pub fn quick(mut self) -> Self {
        let q = MhConfig::quick();
        self.mh.n_burn = q.n_burn;
        self.mh.n_draws = q.n_draws;
        self
    }
}
