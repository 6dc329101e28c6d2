//! Marginal likelihoods by the Chib-Jeliazkov method, Bayes-factor
//! endogeneity tests and comparison across endogeneity configurations.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::moments::{bits, MomentModel};
use crate::pipeline::{fit_model, FitOptions, ModelFit, PriorRecipe};
use crate::posterior::{batch_means_var, Chain, MvStudentT, Target};
use crate::priors::PriorSpec;

/// Log marginal likelihood with its Chib decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceEstimate {
    pub log_ml: f64,
    pub log_etel_at_star: f64,
    pub log_prior_at_star: f64,
    pub log_post_ordinate: f64,
    pub theta_star: Vec<f64>,
    pub mc_se: f64,
    pub m_draws: usize,
    pub j_draws: usize,
    /// Present when the evidence is renormalized to the feasible set.
    pub feasibility: Option<FeasibilityMass>,
}

impl EvidenceEstimate {
    /// `log_ml` recomputed from the three components.
    pub fn recombined(&self) -> f64 {
        let base = self.log_etel_at_star + self.log_prior_at_star - self.log_post_ordinate;
        match &self.feasibility {
            Some(f) => base - f.p_hat.ln(),
            None => base,
        }
    }
}

fn log_mean_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + (v.iter().map(|x| (x - m).exp()).sum::<f64>() / v.len() as f64).ln()
}

/// Chib-Jeliazkov estimate at the chain's mode with `j_draws` fresh
/// proposal draws for the denominator.
pub fn chib_jeliazkov<T: Target + ?Sized>(t: &T, chain: &Chain, j_draws: usize) -> Result<EvidenceEstimate> {
    chib_jeliazkov_at(t, chain, &chain.mode, j_draws)
}

/// Chib-Jeliazkov estimate at an arbitrary point `theta_star` of the support.
///
/// The posterior ordinate is
/// `mean_g[alpha(theta_g, theta*) q(theta*)] / mean_j[alpha(theta*, theta_j)]`
/// with `theta_g` the chain draws and `theta_j` independent draws from the
/// proposal; infeasible `theta_j` contribute zero.
pub fn chib_jeliazkov_at<T: Target + ?Sized>(
    t: &T,
    chain: &Chain,
    theta_star: &[f64],
    j_draws: usize,
) -> Result<EvidenceEstimate> {
    if chain.is_empty() {
        return Err(Error::Evidence("chain has no draws".into()));
    }
    if j_draws == 0 {
        return Err(Error::Evidence("at least one proposal draw is required".into()));
    }
    let log_lik = t
        .log_likelihood(theta_star)
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Evidence("evaluation point is outside the support".into()))?;
    let log_prior = t.log_prior(theta_star);
    let lp_star = log_lik + log_prior;
    let proposal = MvStudentT::new(&chain.mode, &chain.v_hat, chain.proposal_df)?;
    let lq_star = proposal.log_pdf(theta_star);

    let num: Vec<f64> = (0..chain.len())
        .map(|g| {
            let row: Vec<f64> = chain.draws.row(g).iter().copied().collect();
            let lq = proposal.log_pdf(&row);
            (lp_star - chain.log_post[g] + lq - lq_star).min(0.0) + lq_star
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(chain.seed);
    rng.set_stream(1);
    let den: Vec<f64> = (0..j_draws)
        .map(|_| {
            let x = proposal.sample(&mut rng);
            let lp = t.log_posterior(&x);
            if lp.is_finite() {
                (lp - lp_star + lq_star - proposal.log_pdf(&x)).min(0.0).exp()
            } else {
                0.0
            }
        })
        .collect();
    let den_mean = den.iter().sum::<f64>() / j_draws as f64;
    if !(den_mean > 0.0) {
        return Err(Error::Evidence(format!(
            "no proposal draw was accepted from the evaluation point ({j_draws} draws)"
        )));
    }
    let log_num = log_mean_exp(&num);
    let log_post_ordinate = log_num - den_mean.ln();

    // delta-method standard error on the log scale
    let shift = num.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = num.iter().map(|v| (v - shift).exp()).collect();
    let scaled_mean = scaled.iter().sum::<f64>() / scaled.len() as f64;
    let num_var = batch_means_var(&scaled, 20);
    let num_rel = if num_var.is_finite() { num_var / (scaled_mean * scaled_mean) } else { 0.0 };
    let den_var = den.iter().map(|v| (v - den_mean).powi(2)).sum::<f64>() / (j_draws.max(2) - 1) as f64;
    let den_rel = den_var / j_draws as f64 / (den_mean * den_mean);
    let mc_se = (num_rel + den_rel).sqrt();

    Ok(EvidenceEstimate {
        log_ml: log_lik + log_prior - log_post_ordinate,
        log_etel_at_star: log_lik,
        log_prior_at_star: log_prior,
        log_post_ordinate,
        theta_star: theta_star.to_vec(),
        mc_se,
        m_draws: chain.len(),
        j_draws,
        feasibility: None,
    })
}

/// Prior probability of the feasible set, estimated by prior simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityMass {
    pub p_hat: f64,
    pub se: f64,
    pub feasible: usize,
    pub draws: usize,
}

impl FeasibilityMass {
    pub fn from_counts(feasible: usize, draws: usize) -> Self {
        let p = feasible as f64 / draws as f64;
        FeasibilityMass {
            p_hat: p,
            se: (p * (1.0 - p) / draws as f64).sqrt(),
            feasible,
            draws,
        }
    }
}

/// Fraction of `b` prior draws at which the likelihood is defined.
pub fn prior_feasibility_mass<T: Target + ?Sized>(t: &T, prior: &PriorSpec, b: usize, seed: u64) -> Result<FeasibilityMass> {
    if b < 100 {
        return Err(Error::Argument(format!("feasibility mass needs at least 100 draws, got {b}")));
    }
    if prior.dim() != t.dim() {
        return Err(Error::Argument("prior and target dimensions differ".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let feasible = (0..b).filter(|_| t.log_likelihood(&prior.sample(&mut rng)).is_some()).count();
    let mass = FeasibilityMass::from_counts(feasible, b);
    if feasible == 0 {
        log::warn!("no prior draw is feasible; the normalized evidence is undefined");
    }
    Ok(mass)
}

/// Renormalizes an estimate to the prior restricted to the feasible set.
pub fn normalize_evidence(mut est: EvidenceEstimate, mass: FeasibilityMass) -> Result<EvidenceEstimate> {
    if mass.feasible == 0 {
        return Err(Error::Evidence("prior puts no simulated mass on the feasible set".into()));
    }
    est.log_ml -= mass.p_hat.ln();
    let rel = mass.se / mass.p_hat;
    est.mc_se = (est.mc_se * est.mc_se + rel * rel).sqrt();
    est.feasibility = Some(mass);
    Ok(est)
}

/// Endogeneity verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Endogenous,
    Exogenous,
}

/// Bayes-factor comparison of the base and extended models.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndogeneityTest {
    pub log_ml_b: f64,
    pub log_ml_e: f64,
    pub mc_se_b: f64,
    pub mc_se_e: f64,
    pub log_bf_eb: f64,
    pub verdict: Verdict,
    pub base: ModelSummary,
    pub extended: ModelSummary,
}

/// Declares endogeneity when `log BF_eb >= 0`.
pub fn verdict(log_bf_eb: f64) -> Verdict {
    if log_bf_eb >= 0.0 {
        Verdict::Endogenous
    } else {
        Verdict::Exogenous
    }
}

/// Fits the base and extended models and compares their evidence.
pub fn test_endogeneity(ds: &Dataset, recipe: &PriorRecipe, opts: &FitOptions) -> Result<EndogeneityTest> {
    let base = MomentModel::base(ds)?;
    let ext = MomentModel::extended(ds)?;
    let fit_b = fit_model(ds, &base, recipe, opts).map_err(|e| e.in_model("base"))?;
    let fit_e = fit_model(ds, &ext, recipe, opts).map_err(|e| e.in_model("extended"))?;
    let log_bf_eb = fit_e.evidence.log_ml - fit_b.evidence.log_ml;
    Ok(EndogeneityTest {
        log_ml_b: fit_b.evidence.log_ml,
        log_ml_e: fit_e.evidence.log_ml,
        mc_se_b: fit_b.evidence.mc_se,
        mc_se_e: fit_e.evidence.mc_se,
        log_bf_eb,
        verdict: verdict(log_bf_eb),
        base: ModelSummary::from_fit(&fit_b),
        extended: ModelSummary::from_fit(&fit_e),
    })
}

/// Compact per-model record used in reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub label: String,
    pub mask: String,
    pub coef_mask: String,
    pub n_params: usize,
    pub log_ml: f64,
    pub mc_se: f64,
    pub log_etel_at_star: f64,
    pub log_prior_at_star: f64,
    pub log_post_ordinate: f64,
    pub accept_rate: f64,
    pub names: Vec<String>,
    pub posterior_mean: Vec<f64>,
    pub posterior_sd: Vec<f64>,
}

impl ModelSummary {
    pub fn from_fit(fit: &ModelFit) -> Self {
        ModelSummary {
            label: fit.model.label(),
            mask: fit.model.mask_bits(),
            coef_mask: bits(&fit.model.coef_mask),
            n_params: fit.model.n_params(),
            log_ml: fit.evidence.log_ml,
            mc_se: fit.evidence.mc_se,
            log_etel_at_star: fit.evidence.log_etel_at_star,
            log_prior_at_star: fit.evidence.log_prior_at_star,
            log_post_ordinate: fit.evidence.log_post_ordinate,
            accept_rate: fit.chain.accept_rate,
            names: fit.chain.names.clone(),
            posterior_mean: fit.chain.mean(),
            posterior_sd: fit.chain.sd(),
        }
    }
}

/// One candidate model in a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonEntry {
    pub label: String,
    pub mask: String,
    pub coef_mask: String,
    pub n_free_v: usize,
    /// `None` when the fit failed.
    pub summary: Option<ModelSummary>,
    pub error: Option<String>,
    /// `log_ml` minus that of the base model, when both are available.
    pub log_bf_vs_base: Option<f64>,
}

/// Ranked evidence across candidate models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub entries: Vec<ComparisonEntry>,
    /// Indices into `entries`, best first; failed fits are excluded.
    pub ranking: Vec<usize>,
    pub winner: Option<usize>,
}

impl ComparisonReport {
    pub fn log_ml(&self, label: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.label == label)
            .and_then(|e| e.summary.as_ref())
            .map(|s| s.log_ml)
    }

    pub fn winner_label(&self) -> Option<&str> {
        self.winner.map(|i| self.entries[i].label.as_str())
    }

    pub fn ranked_labels(&self) -> Vec<&str> {
        self.ranking.iter().map(|&i| self.entries[i].label.as_str()).collect()
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        writeln!(f)?;
        Ok(())
    }

    /// One row per model: label, mask, coef_mask, rank, log_ml, mc_se,
    /// log_bf_vs_base, the Chib components and any error message.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "label",
            "mask",
            "coef_mask",
            "rank",
            "log_ml",
            "mc_se",
            "log_bf_vs_base",
            "log_etel_at_star",
            "log_prior_at_star",
            "log_post_ordinate",
            "accept_rate",
            "error",
        ])?;
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (i, e) in self.entries.iter().enumerate() {
            let rank = self.ranking.iter().position(|&r| r == i).map(|r| (r + 1).to_string());
            let s = e.summary.as_ref();
            w.write_record([
                e.label.clone(),
                e.mask.clone(),
                e.coef_mask.clone(),
                rank.unwrap_or_default(),
                fmt(s.map(|s| s.log_ml)),
                fmt(s.map(|s| s.mc_se)),
                fmt(e.log_bf_vs_base),
                fmt(s.map(|s| s.log_etel_at_star)),
                fmt(s.map(|s| s.log_prior_at_star)),
                fmt(s.map(|s| s.log_post_ordinate)),
                fmt(s.map(|s| s.accept_rate)),
                e.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Ranks entries by `log_ml`, breaking near-ties (within `1e-9`) toward the
/// model with fewer free `v` components.
pub fn rank_entries(entries: &[ComparisonEntry]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..entries.len()).filter(|&i| entries[i].summary.is_some()).collect();
    let ml = |i: usize| entries[i].summary.as_ref().map_or(f64::NEG_INFINITY, |s| s.log_ml);
    idx.sort_by(|&a, &b| {
        let (ma, mb) = (ml(a), ml(b));
        if (ma - mb).abs() <= 1e-9 {
            entries[a].n_free_v.cmp(&entries[b].n_free_v).then(a.cmp(&b))
        } else {
            mb.total_cmp(&ma)
        }
    });
    idx
}

/// Fits every candidate model (in parallel) and ranks them by evidence.
/// Failed fits are reported and excluded from the ranking.
pub fn select_models(ds: &Dataset, models: &[MomentModel], recipe: &PriorRecipe, opts: &FitOptions) -> Result<ComparisonReport> {
    if models.is_empty() {
        return Err(Error::Argument("no candidate models".into()));
    }
    for (i, a) in models.iter().enumerate() {
        if models[..i].contains(a) {
            return Err(Error::Argument(format!("duplicate candidate model {}", a.label())));
        }
    }
    let results: Vec<Result<ModelFit>> = models.par_iter().map(|m| fit_model(ds, m, recipe, opts)).collect();
    let mut entries: Vec<ComparisonEntry> = models
        .iter()
        .zip(results)
        .map(|(m, r)| {
            let (summary, error) = match r {
                Ok(fit) => (Some(ModelSummary::from_fit(&fit)), None),
                Err(e) => {
                    log::warn!("{}: fit failed: {e}", m.label());
                    (None, Some(e.to_string()))
                }
            };
            ComparisonEntry {
                label: m.label(),
                mask: m.mask_bits(),
                coef_mask: bits(&m.coef_mask),
                n_free_v: m.n_free_v(),
                summary,
                error,
                log_bf_vs_base: None,
            }
        })
        .collect();
    let base_ml = models
        .iter()
        .position(|m| m.is_base() && m.coef_mask.iter().all(|&c| c))
        .and_then(|i| entries[i].summary.as_ref().map(|s| s.log_ml));
    if let Some(b) = base_ml {
        for e in &mut entries {
            e.log_bf_vs_base = e.summary.as_ref().map(|s| s.log_ml - b);
        }
    }
    let ranking = rank_entries(&entries);
    Ok(ComparisonReport {
        winner: ranking.first().copied(),
        ranking,
        entries,
    })
}

/// Deterministic 64-bit mixing (splitmix64 finalizer).
pub fn mix_seed(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combines several words into one seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5eed_u64, |acc, &p| mix_seed(acc ^ mix_seed(p)))
}
