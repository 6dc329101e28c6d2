//! Gaussian-copula data generating processes and the Monte Carlo harness.
//!
//! The regression error has a skewed two-component normal mixture margin and
//! is coupled to the first-stage errors through a Gaussian copula: a latent
//! normal vector with correlation matrix `R` is drawn, and the error is
//! `F_mix^-1(Phi(e_1))`.

use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::data::{Dataset, Schema};
use crate::error::{Error, Result};
use crate::evidence::{derive_seed, test_endogeneity, Verdict};
use crate::freq::{msc_criteria, two_step_gmm};
use crate::linalg;
use crate::moments::MomentModel;
use crate::pipeline::{FitOptions, PriorRecipe};

/// Finite mixture of normals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    /// `(weight, mean, sd)` per component.
    pub components: Vec<(f64, f64, f64)>,
}

impl Default for Mixture {
    fn default() -> Self {
        Mixture {
            components: vec![(0.5, 0.5, 0.5), (0.5, -0.5, 1.118)],
        }
    }
}

impl Mixture {
    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.components.iter().map(|c| c.0).sum();
        let ok = !self.components.is_empty()
            && (total - 1.0).abs() < 1e-12
            && self.components.iter().all(|&(w, m, s)| w > 0.0 && m.is_finite() && s > 0.0 && s.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid mixture {:?}", self.components)))
        }
    }

    fn parts(&self) -> impl Iterator<Item = (f64, Normal)> + '_ {
        self.components
            .iter()
            .map(|&(w, m, s)| (w, Normal::new(m, s).expect("validated component")))
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.parts().map(|(w, d)| w * d.cdf(x)).sum()
    }

    pub fn sf(&self, x: f64) -> f64 {
        self.parts().map(|(w, d)| w * d.sf(x)).sum()
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.parts().map(|(w, d)| w * d.pdf(x)).sum()
    }

    pub fn mean(&self) -> f64 {
        self.components.iter().map(|&(w, m, _)| w * m).sum()
    }

    pub fn variance(&self) -> f64 {
        let mu = self.mean();
        self.components.iter().map(|&(w, m, s)| w * (s * s + m * m)).sum::<f64>() - mu * mu
    }

    /// Root of `F(m) = u` by bisection on `[-12, 12]` (widened until it
    /// brackets) to an interval width of `1e-12`. For `u > 1/2` the survival
    /// function is matched instead, which keeps precision in the upper tail.
    pub fn inverse_cdf(&self, u: f64) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::Argument(format!("probability {u} is outside (0, 1)")));
        }
        let upper = u > 0.5;
        let target = if upper { 1.0 - u } else { u };
        // h is increasing in m in both branches
        let h = |m: f64| if upper { target - self.sf(m) } else { self.cdf(m) - target };
        let (mut lo, mut hi) = (-12.0, 12.0);
        while h(lo) > 0.0 {
            lo *= 2.0;
        }
        while h(hi) < 0.0 {
            hi *= 2.0;
        }
        while hi - lo > 1e-12 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if h(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Maps a latent standard normal draw to the mixture margin.
    pub fn transform(&self, e: f64) -> f64 {
        let std = Normal::new(0.0, 1.0).expect("unit normal");
        let root = if e > 0.0 {
            let s = std.sf(e);
            self.inverse_sf(s)
        } else {
            self.inverse_cdf(std.cdf(e))
        };
        root.expect("probability strictly inside (0, 1) for finite draws")
    }

    fn inverse_sf(&self, s: f64) -> Result<f64> {
        if s <= 0.5 {
            if !(s > 0.0) {
                return Err(Error::Argument(format!("survival probability {s} is not positive")));
            }
            // solve sf(m) = s directly
            let h = |m: f64| s - self.sf(m);
            let (mut lo, mut hi) = (-12.0, 12.0);
            while h(lo) > 0.0 {
                lo *= 2.0;
            }
            while h(hi) < 0.0 {
                hi *= 2.0;
            }
            while hi - lo > 1e-12 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if h(mid) < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            Ok(0.5 * (lo + hi))
        } else {
            self.inverse_cdf(1.0 - s)
        }
    }

    /// `E[e * m(e)]` for `e ~ N(0, 1)` and `m` the copula transform, by
    /// Simpson's rule on `[-9, 9]`.
    pub fn latent_covariance(&self) -> f64 {
        let k = 3000;
        let (a, b) = (-9.0, 9.0);
        let h = (b - a) / k as f64;
        let std = Normal::new(0.0, 1.0).expect("unit normal");
        let f = |e: f64| e * self.transform(e) * std.pdf(e);
        let mut s = f(a) + f(b);
        for i in 1..k {
            let x = a + h * i as f64;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        s * h / 3.0
    }
}

/// Inverse CDF of a mixture margin.
pub fn mixture_inverse_cdf(u: f64, margin: &Mixture) -> Result<f64> {
    margin.inverse_cdf(u)
}

fn default_latent_cov() -> f64 {
    static C: OnceLock<f64> = OnceLock::new();
    *C.get_or_init(|| Mixture::default().latent_covariance())
}

/// Coefficients of the single-treatment design
/// `x = d0 + d1 z1 + d2 z2 + u`, `y = g0 + b x + g1 z1 + eps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineDesign {
    pub beta: f64,
    pub gamma0: f64,
    pub gamma1: f64,
    pub delta0: f64,
    pub delta1: f64,
    pub delta2: f64,
}

impl Default for BaselineDesign {
    fn default() -> Self {
        BaselineDesign {
            beta: 1.0,
            gamma0: 1.0,
            gamma1: 1.0,
            delta0: 1.0,
            delta1: 0.5,
            delta2: 1.0,
        }
    }
}

/// Two treatments with error covariances `v`:
/// `x_j = z2_j + u_j`, `y = b1 x1 + b2 x2 + g0 + g1 z1 + eps`, with
/// `z1, z2a, z2b` independent standard normals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwoTreatmentDesign {
    pub beta1: f64,
    pub beta2: f64,
    pub gamma0: f64,
    pub gamma1: f64,
    /// Target `(Cov(x1, eps), Cov(x2, eps))`.
    pub v: [f64; 2],
}

impl Default for TwoTreatmentDesign {
    fn default() -> Self {
        TwoTreatmentDesign {
            beta1: 1.0,
            beta2: 0.8,
            gamma0: 1.0,
            gamma1: 0.6,
            v: [0.5, 0.0],
        }
    }
}

/// Quadratic design `y = g0 + b1 x + b2 x^2 + g1 z1 + eps` with first stage
/// `x = pi0 + pi1 z1 + pi2 z2 + u` and `Cov(x, eps) = cov_x_eps`; the
/// instruments are `z2` and `z2^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadraticDesign {
    pub gamma0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gamma1: f64,
    pub pi0: f64,
    pub pi1: f64,
    pub pi2: f64,
    pub cov_x_eps: f64,
}

impl Default for QuadraticDesign {
    fn default() -> Self {
        QuadraticDesign {
            gamma0: 0.5,
            beta1: 1.0,
            beta2: 1.0,
            gamma1: 0.8,
            pi0: 0.0,
            pi1: 0.0,
            pi2: 1.0,
            cov_x_eps: 0.5,
        }
    }
}

/// Which data generating process to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Design {
    Baseline(BaselineDesign),
    TwoTreatments(TwoTreatmentDesign),
    Quadratic(QuadraticDesign),
}

impl Default for Design {
    fn default() -> Self {
        Design::Baseline(BaselineDesign::default())
    }
}

/// Simulation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    /// Latent copula correlation between the error and the first-stage
    /// error (baseline design only).
    #[serde(default)]
    pub rho: f64,
    #[serde(default)]
    pub design: Design,
    #[serde(default)]
    pub epsilon: Mixture,
}

impl DgpConfig {
    pub fn baseline(n: usize, rho: f64, seed: u64) -> Self {
        DgpConfig {
            n,
            seed,
            rho,
            design: Design::default(),
            epsilon: Mixture::default(),
        }
    }

    pub fn two_treatments(n: usize, seed: u64) -> Self {
        DgpConfig {
            design: Design::TwoTreatments(TwoTreatmentDesign::default()),
            ..Self::baseline(n, 0.0, seed)
        }
    }

    pub fn quadratic(n: usize, seed: u64) -> Self {
        DgpConfig {
            design: Design::Quadratic(QuadraticDesign::default()),
            ..Self::baseline(n, 0.0, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("n must be positive".into()));
        }
        if !(self.rho.abs() < 1.0) {
            return Err(Error::Config(format!("rho must lie in (-1, 1), got {}", self.rho)));
        }
        self.epsilon.validate()
    }

    /// Latent correlation matrix of `(e_eps, e_2, e_3)`.
    pub fn latent_correlation(&self) -> Result<DMatrix<f64>> {
        let mut r = DMatrix::identity(3, 3);
        let c = if self.epsilon == Mixture::default() {
            default_latent_cov()
        } else {
            self.epsilon.latent_covariance()
        };
        let (r12, r13) = match self.design {
            Design::Baseline(_) => (self.rho, 0.0),
            Design::TwoTreatments(d) => (d.v[0] / c, d.v[1] / c),
            Design::Quadratic(d) => (d.cov_x_eps / c, 0.0),
        };
        r[(0, 1)] = r12;
        r[(1, 0)] = r12;
        r[(0, 2)] = r13;
        r[(2, 0)] = r13;
        let eig = r.clone().symmetric_eigen();
        if !(eig.eigenvalues.min() > 0.0) {
            return Err(Error::Config(format!(
                "copula correlation matrix is not positive definite: {:?}",
                r.as_slice()
            )));
        }
        Ok(r)
    }
}

/// Draws from the latent normal with correlation `r`, `n` rows.
pub fn latent_draws(r: &DMatrix<f64>, n: usize, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
    let l = linalg::cholesky_lower(r).ok_or_else(|| Error::Config("correlation matrix is not PSD".into()))?;
    let k = r.nrows();
    let mut out = DMatrix::zeros(n, k);
    for i in 0..n {
        let z = DVector::from_fn(k, |_, _| StandardNormal.sample(rng));
        let e = &l * z;
        for j in 0..k {
            out[(i, j)] = e[j];
        }
    }
    Ok(out)
}

/// Simulates a dataset.
///
/// Columns: baseline `y, x, const, z1, z2`; two treatments
/// `y, x1, x2, const, z1, z2a, z2b`; quadratic `y, x, xsq, const, z1, z2, z2sq`.
pub fn generate_dataset(cfg: &DgpConfig) -> Result<Dataset> {
    cfg.validate()?;
    let r = cfg.latent_correlation()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n;
    let latent = latent_draws(&r, n, &mut rng)?;
    let eps: Vec<f64> = (0..n).map(|i| cfg.epsilon.transform(latent[(i, 0)])).collect();
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let ones = DVector::from_element(n, 1.0);
    match cfg.design {
        Design::Baseline(d) => {
            let z1 = DVector::from_fn(n, |i, _| latent[(i, 2)]);
            let z2 = DVector::from_fn(n, |_, _| normal());
            let x = DVector::from_fn(n, |i, _| d.delta0 + d.delta1 * z1[i] + d.delta2 * z2[i] + latent[(i, 1)]);
            let y = DVector::from_fn(n, |i, _| d.gamma0 + d.beta * x[i] + d.gamma1 * z1[i] + eps[i]);
            Dataset::new(
                y,
                DMatrix::from_columns(&[x]),
                DMatrix::from_columns(&[ones, z1]),
                DMatrix::from_columns(&[z2]),
                None,
                Schema::new("y", &["x"], &["const", "z1"], &["z2"]),
            )
        }
        Design::TwoTreatments(d) => {
            let z1 = DVector::from_fn(n, |_, _| normal());
            let z2a = DVector::from_fn(n, |_, _| normal());
            let z2b = DVector::from_fn(n, |_, _| normal());
            let x1 = DVector::from_fn(n, |i, _| z2a[i] + latent[(i, 1)]);
            let x2 = DVector::from_fn(n, |i, _| z2b[i] + latent[(i, 2)]);
            let y = DVector::from_fn(n, |i, _| d.beta1 * x1[i] + d.beta2 * x2[i] + d.gamma0 + d.gamma1 * z1[i] + eps[i]);
            Dataset::new(
                y,
                DMatrix::from_columns(&[x1, x2]),
                DMatrix::from_columns(&[ones, z1]),
                DMatrix::from_columns(&[z2a, z2b]),
                None,
                Schema::new("y", &["x1", "x2"], &["const", "z1"], &["z2a", "z2b"]),
            )
        }
        Design::Quadratic(d) => {
            let z1 = DVector::from_fn(n, |_, _| normal());
            let z2 = DVector::from_fn(n, |_, _| normal());
            let x = DVector::from_fn(n, |i, _| d.pi0 + d.pi1 * z1[i] + d.pi2 * z2[i] + latent[(i, 1)]);
            let xsq = x.map(|v| v * v);
            let z2sq = z2.map(|v| v * v);
            let y = DVector::from_fn(n, |i, _| d.gamma0 + d.beta1 * x[i] + d.beta2 * xsq[i] + d.gamma1 * z1[i] + eps[i]);
            Dataset::new(
                y,
                DMatrix::from_columns(&[x, xsq]),
                DMatrix::from_columns(&[ones, z1]),
                DMatrix::from_columns(&[z2, z2sq]),
                None,
                Schema::new("y", &["x", "xsq"], &["const", "z1"], &["z2", "z2sq"]),
            )
        }
    }
}

/// Grid of Monte Carlo cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McGrid {
    pub rho: Vec<f64>,
    pub n: Vec<usize>,
    pub reps: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

fn default_jobs() -> usize {
    1
}

impl McGrid {
    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::Config("reps must be at least 1".into()));
        }
        if self.rho.is_empty() || self.n.is_empty() {
            return Err(Error::Config("grid needs at least one rho and one n".into()));
        }
        if let Some(n) = self.n.iter().find(|&&n| n < 50) {
            return Err(Error::Config(format!("grid sample sizes must be at least 50, got {n}")));
        }
        if let Some(r) = self.rho.iter().find(|r| !(r.abs() < 1.0)) {
            return Err(Error::Config(format!("rho must lie in (-1, 1), got {r}")));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        Ok(())
    }
}

/// One replication of a cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReplication {
    pub rho: f64,
    pub n: usize,
    pub rep: usize,
    pub seed: u64,
    pub log_bf_eb: Option<f64>,
    pub extended_wins: Option<bool>,
    pub error: Option<String>,
}

/// Aggregated results of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub rho: f64,
    pub n: usize,
    pub reps: usize,
    pub extended_wins: usize,
    pub failures: usize,
    pub mean_log_bf: f64,
    pub wall_time_s: f64,
}

/// Monte Carlo output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McTable {
    pub rows: Vec<McRow>,
    pub replications: Vec<McReplication>,
}

impl McTable {
    /// Writes `rho,n,reps,extended_wins,failures,mean_log_bf,wall_time_s`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "rho,n,reps,extended_wins,failures,mean_log_bf,wall_time_s")?;
        for r in &self.rows {
            writeln!(
                f,
                "{},{},{},{},{},{},{:.3}",
                r.rho, r.n, r.reps, r.extended_wins, r.failures, r.mean_log_bf, r.wall_time_s
            )?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Seed of replication `rep` in cell `(rho_idx, n_idx)`.
pub fn replication_seed(base_seed: u64, rho_idx: usize, n_idx: usize, rep: usize) -> u64 {
    derive_seed(&[base_seed, rho_idx as u64, n_idx as u64, rep as u64])
}

/// Runs the endogeneity test on `grid.reps` simulated baseline datasets per
/// `(rho, n)` cell. `template` supplies the design (its `n`, `rho` and `seed`
/// are overridden per replication).
pub fn run_mc(grid: &McGrid, template: &DgpConfig, recipe: &PriorRecipe, opts: &FitOptions) -> Result<McTable> {
    grid.validate()?;
    recipe.validate()?;
    opts.mh.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(grid.jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
    let mut rows = Vec::new();
    let mut replications = Vec::new();
    for (ri, &rho) in grid.rho.iter().enumerate() {
        for (ni, &n) in grid.n.iter().enumerate() {
            let started = Instant::now();
            let reps: Vec<McReplication> = pool.install(|| {
                (0..grid.reps)
                    .into_par_iter()
                    .map(|rep| {
                        let seed = replication_seed(grid.base_seed, ri, ni, rep);
                        let cfg = DgpConfig {
                            n,
                            rho,
                            seed,
                            ..template.clone()
                        };
                        let mut o = *opts;
                        o.mh.seed = derive_seed(&[seed, 1]);
                        let outcome = generate_dataset(&cfg).and_then(|ds| test_endogeneity(&ds, recipe, &o));
                        match outcome {
                            Ok(t) => McReplication {
                                rho,
                                n,
                                rep,
                                seed,
                                log_bf_eb: Some(t.log_bf_eb),
                                extended_wins: Some(t.verdict == Verdict::Endogenous),
                                error: None,
                            },
                            Err(e) => McReplication {
                                rho,
                                n,
                                rep,
                                seed,
                                log_bf_eb: None,
                                extended_wins: None,
                                error: Some(e.to_string()),
                            },
                        }
                    })
                    .collect()
            });
            let ok: Vec<f64> = reps.iter().filter_map(|r| r.log_bf_eb).collect();
            let failures = reps.len() - ok.len();
            if failures > 0 {
                log::warn!("rho={rho}, n={n}: {failures} replications failed");
            }
            rows.push(McRow {
                rho,
                n,
                reps: grid.reps,
                extended_wins: reps.iter().filter(|r| r.extended_wins == Some(true)).count(),
                failures,
                mean_log_bf: if ok.is_empty() {
                    f64::NAN
                } else {
                    ok.iter().sum::<f64>() / ok.len() as f64
                },
                wall_time_s: started.elapsed().as_secs_f64(),
            });
            replications.extend(reps);
        }
    }
    Ok(McTable { rows, replications })
}

/// Moment-selection frequencies of one Monte Carlo cell: how often each
/// criterion picks the extended (all treatments endogenous) model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MscMcRow {
    pub rho: f64,
    pub n: usize,
    pub reps: usize,
    pub bic_extended: usize,
    pub aic_extended: usize,
    pub hqic_extended: usize,
    pub failures: usize,
}

/// GMM moment selection over the base and extended models on simulated data.
pub fn run_msc_mc(grid: &McGrid, template: &DgpConfig) -> Result<Vec<MscMcRow>> {
    grid.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(grid.jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
    let mut rows = Vec::new();
    for (ri, &rho) in grid.rho.iter().enumerate() {
        for (ni, &n) in grid.n.iter().enumerate() {
            let picks: Vec<Option<[bool; 3]>> = pool.install(|| {
                (0..grid.reps)
                    .into_par_iter()
                    .map(|rep| {
                        let cfg = DgpConfig {
                            n,
                            rho,
                            seed: replication_seed(grid.base_seed, ri, ni, rep),
                            ..template.clone()
                        };
                        let ds = generate_dataset(&cfg).ok()?;
                        let fits = [MomentModel::base(&ds).ok()?, MomentModel::extended(&ds).ok()?]
                            .iter()
                            .map(|m| two_step_gmm(m, &ds))
                            .collect::<Result<Vec<_>>>()
                            .ok()?;
                        let r = msc_criteria(&fits, ds.n_blocks()).ok()?;
                        Some([r.selected_bic == 1, r.selected_aic == 1, r.selected_hqic == 1])
                    })
                    .collect()
            });
            let count = |k: usize| picks.iter().filter(|p| matches!(p, Some(f) if f[k])).count();
            rows.push(MscMcRow {
                rho,
                n,
                reps: grid.reps,
                bic_extended: count(0),
                aic_extended: count(1),
                hqic_extended: count(2),
                failures: picks.iter().filter(|p| p.is_none()).count(),
            });
        }
    }
    Ok(rows)
}

/// Writes `rho,n,reps,bic_extended,aic_extended,hqic_extended,failures`.
pub fn write_msc_mc_csv(rows: &[MscMcRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
