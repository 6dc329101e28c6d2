//! ETEL posteriors: truncated log posterior, posterior mode search and the
//! tailored independence Metropolis-Hastings sampler.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::etel::{solve_tilt, TiltConfig};
use crate::linalg;
use crate::moments::{MomentEvaluator, MomentModel, ParamVector};
use crate::priors::PriorSpec;

/// A log posterior over a flat parameter vector, split into a likelihood
/// part that may be undefined and a prior part.
pub trait Target {
    fn dim(&self) -> usize;

    /// Log likelihood, or `None` outside the support.
    fn log_likelihood(&self, x: &[f64]) -> Option<f64>;

    fn log_prior(&self, x: &[f64]) -> f64;

    /// `log_prior + log_likelihood`, or negative infinity outside the support.
    fn log_posterior(&self, x: &[f64]) -> f64 {
        match self.log_likelihood(x) {
            Some(l) if l.is_finite() => l + self.log_prior(x),
            _ => f64::NEG_INFINITY,
        }
    }
}

/// ETEL likelihood of a moment model on a dataset with an independent prior.
#[derive(Debug, Clone)]
pub struct EtelTarget {
    evaluator: MomentEvaluator,
    prior: PriorSpec,
    tilt: TiltConfig,
}

impl EtelTarget {
    pub fn new(model: &MomentModel, ds: &Dataset, prior: PriorSpec, tilt: TiltConfig) -> Result<Self> {
        prior.check_model(model)?;
        Ok(EtelTarget {
            evaluator: MomentEvaluator::new(model, ds)?,
            prior,
            tilt,
        })
    }

    pub fn model(&self) -> &MomentModel {
        self.evaluator.model()
    }

    pub fn prior(&self) -> &PriorSpec {
        &self.prior
    }

    pub fn evaluator(&self) -> &MomentEvaluator {
        &self.evaluator
    }

    /// Whether the tilting problem at `x` is feasible.
    pub fn is_feasible(&self, x: &[f64]) -> bool {
        self.log_likelihood(x).is_some()
    }
}

impl Target for EtelTarget {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn log_likelihood(&self, x: &[f64]) -> Option<f64> {
        let params = ParamVector::from_flat(self.evaluator.model(), x).ok()?;
        let g = self.evaluator.matrix(&params);
        solve_tilt(&g, &self.tilt).ok().and_then(|s| s.log_etel)
    }

    fn log_prior(&self, x: &[f64]) -> f64 {
        self.prior.log_density(x).unwrap_or(f64::NEG_INFINITY)
    }
}

/// Truncated ETEL log posterior at `params`; negative infinity when the
/// tilting problem is infeasible.
pub fn log_posterior(model: &MomentModel, ds: &Dataset, spec: &PriorSpec, params: &ParamVector) -> Result<f64> {
    params.check(model)?;
    let target = EtelTarget::new(model, ds, spec.clone(), TiltConfig::default())?;
    Ok(target.log_posterior(&params.to_flat()))
}

/// Settings for the posterior mode search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModeConfig {
    pub max_iters: usize,
    /// Convergence tolerance on the change in log posterior.
    pub tol: f64,
    /// Number of extra starts, each a perturbation of the best point so far.
    pub restarts: usize,
}

impl Default for ModeConfig {
    fn default() -> Self {
        ModeConfig {
            max_iters: 200,
            tol: 1e-10,
            restarts: 0,
        }
    }
}

/// Posterior mode and proposal scale.
#[derive(Debug, Clone)]
pub struct Mode {
    pub mode: Vec<f64>,
    pub log_post: f64,
    /// Inverse negated Hessian at the mode.
    pub v_hat: DMatrix<f64>,
    pub iterations: usize,
}

fn fd_gradient<T: Target + ?Sized>(t: &T, x: &[f64], fx: f64) -> DVector<f64> {
    let d = x.len();
    let mut g = DVector::zeros(d);
    let mut buf = x.to_vec();
    for j in 0..d {
        let h = 1e-6 * (1.0 + x[j].abs());
        buf[j] = x[j] + h;
        let up = t.log_posterior(&buf);
        buf[j] = x[j] - h;
        let dn = t.log_posterior(&buf);
        buf[j] = x[j];
        g[j] = match (up.is_finite(), dn.is_finite()) {
            (true, true) => (up - dn) / (2.0 * h),
            (true, false) => (up - fx) / h,
            (false, true) => (fx - dn) / h,
            (false, false) => 0.0,
        };
    }
    g
}

/// Central finite-difference Hessian with step `1e-4 * (1 + |x_j|)`.
pub fn fd_hessian<T: Target + ?Sized>(t: &T, x: &[f64]) -> Option<DMatrix<f64>> {
    let d = x.len();
    let f0 = t.log_posterior(x);
    if !f0.is_finite() {
        return None;
    }
    let h: Vec<f64> = x.iter().map(|v| 1e-4 * (1.0 + v.abs())).collect();
    let mut hess = DMatrix::zeros(d, d);
    let mut buf = x.to_vec();
    let eval = |buf: &mut Vec<f64>, shifts: &[(usize, f64)]| {
        for &(j, s) in shifts {
            buf[j] += s;
        }
        let v = t.log_posterior(buf);
        buf.copy_from_slice(x);
        v
    };
    for i in 0..d {
        let up = eval(&mut buf, &[(i, h[i])]);
        let dn = eval(&mut buf, &[(i, -h[i])]);
        hess[(i, i)] = (up - 2.0 * f0 + dn) / (h[i] * h[i]);
        for j in (i + 1)..d {
            let pp = eval(&mut buf, &[(i, h[i]), (j, h[j])]);
            let pm = eval(&mut buf, &[(i, h[i]), (j, -h[j])]);
            let mp = eval(&mut buf, &[(i, -h[i]), (j, h[j])]);
            let mm = eval(&mut buf, &[(i, -h[i]), (j, -h[j])]);
            let v = (pp - pm - mp + mm) / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    if hess.iter().all(|v| v.is_finite()) {
        Some(hess)
    } else {
        None
    }
}

pub(crate) fn bfgs<T: Target + ?Sized>(t: &T, start: &[f64], cfg: &ModeConfig) -> (Vec<f64>, f64, usize) {
    let d = start.len();
    let mut x = DVector::from_column_slice(start);
    let mut fx = t.log_posterior(start);
    let mut g = fd_gradient(t, x.as_slice(), fx);
    let mut hinv = DMatrix::<f64>::identity(d, d);
    // initial inverse-Hessian guess scaled to the gradient
    let gn = g.norm();
    if gn > 0.0 {
        hinv *= (1.0 / gn).min(1.0);
    }
    let mut iters = 0;
    let mut stall = 0;
    while iters < cfg.max_iters {
        iters += 1;
        let mut dir = &hinv * &g;
        if dir.dot(&g) <= 0.0 {
            hinv = DMatrix::identity(d, d) * (1.0 / g.norm().max(1.0));
            dir = &hinv * &g;
        }
        let slope = dir.dot(&g);
        let mut step = 1.0;
        let mut next = None;
        while step > 1e-14 {
            let xn = &x + &dir * step;
            let fxn = t.log_posterior(xn.as_slice());
            if fxn.is_finite() && fxn >= fx + 1e-4 * step * slope {
                next = Some((xn, fxn));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fxn)) = next else {
            break;
        };
        let gn = fd_gradient(t, xn.as_slice(), fxn);
        let s = &xn - &x;
        // ascent on f is descent on -f: y = -(g_new - g_old)
        let y = -(&gn - &g);
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(d, d);
            let left = &i - &s * y.transpose() * rho;
            let right = &i - &y * s.transpose() * rho;
            hinv = &left * &hinv * &right + &s * s.transpose() * rho;
        }
        let improvement = fxn - fx;
        x = xn;
        fx = fxn;
        g = gn;
        if improvement.abs() <= cfg.tol * (1.0 + fx.abs()) {
            stall += 1;
            if stall >= 2 {
                break;
            }
        } else {
            stall = 0;
        }
    }
    (x.as_slice().to_vec(), fx, iters)
}

fn newton_polish<T: Target + ?Sized>(t: &T, x: &mut Vec<f64>, fx: &mut f64) {
    for _ in 0..5 {
        let Some(h) = fd_hessian(t, x) else { return };
        let neg = -h;
        let Some(ch) = neg.cholesky() else { return };
        let g = fd_gradient(t, x, *fx);
        let step = ch.solve(&g);
        let mut s = 1.0;
        let mut moved = false;
        while s > 1e-6 {
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + s * b).collect();
            let ft = t.log_posterior(&trial);
            if ft.is_finite() && ft >= *fx {
                let gain = ft - *fx;
                *x = trial;
                *fx = ft;
                moved = gain > 1e-12 * (1.0 + fx.abs());
                break;
            }
            s *= 0.5;
        }
        if !moved {
            return;
        }
    }
}

/// Scale matrix `(-H)^-1` at a maximum, symmetrized, with eigenvalues floored
/// at `1e-10` times the largest.
pub fn proposal_scale(neg_hessian: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut nh = neg_hessian.clone();
    linalg::symmetrize(&mut nh);
    let eig = nh.clone().symmetric_eigen();
    let min = eig.eigenvalues.min();
    if !(min > 0.0) {
        return Err(Error::Conditioning(format!(
            "negated Hessian is not positive definite (eigenvalues {:?})",
            eig.eigenvalues.as_slice()
        )));
    }
    let inv_vals = eig.eigenvalues.map(|v| 1.0 / v);
    let inv = &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();
    let (floored, _) = linalg::floor_eigen(&inv, 1e-10)
        .ok_or_else(|| Error::Conditioning("scale matrix has no positive eigenvalue".into()))?;
    Ok(floored)
}

/// Quasi-Newton posterior mode search followed by a Newton polish and the
/// finite-difference proposal scale.
pub fn find_mode<T: Target + ?Sized>(t: &T, start: &[f64], cfg: &ModeConfig) -> Result<Mode> {
    if start.len() != t.dim() {
        return Err(Error::Argument(format!(
            "start has {} coordinates, target has {}",
            start.len(),
            t.dim()
        )));
    }
    if !t.log_posterior(start).is_finite() {
        return Err(Error::Initialization(
            "log posterior is not finite at the starting point".into(),
        ));
    }
    let (mut x, mut fx, mut iters) = bfgs(t, start, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(0x6d6f6465);
    for _ in 0..cfg.restarts {
        let perturbed: Vec<f64> = x
            .iter()
            .map(|v| v + 0.01 * (1.0 + v.abs()) * (rng.gen::<f64>() - 0.5))
            .collect();
        if !t.log_posterior(&perturbed).is_finite() {
            continue;
        }
        let (xr, fr, ir) = bfgs(t, &perturbed, cfg);
        iters += ir;
        if fr > fx {
            x = xr;
            fx = fr;
        }
    }
    newton_polish(t, &mut x, &mut fx);
    let h = fd_hessian(t, &x).ok_or_else(|| {
        Error::Conditioning("Hessian could not be evaluated at the mode (boundary of the feasible set)".into())
    })?;
    let v_hat = proposal_scale(&(-h))?;
    Ok(Mode {
        mode: x,
        log_post: fx,
        v_hat,
        iterations: iters,
    })
}

/// Multivariate Student-t distribution.
#[derive(Debug, Clone)]
pub struct MvStudentT {
    mean: DVector<f64>,
    chol: DMatrix<f64>,
    df: f64,
    log_const: f64,
}

impl MvStudentT {
    pub fn new(mean: &[f64], scale: &DMatrix<f64>, df: f64) -> Result<Self> {
        let d = mean.len();
        if scale.nrows() != d || scale.ncols() != d || !(df > 0.0) {
            return Err(Error::Argument("invalid multivariate t parameters".into()));
        }
        let chol = linalg::cholesky_lower(scale)
            .ok_or_else(|| Error::Conditioning("proposal scale is not positive definite".into()))?;
        let log_det_half: f64 = (0..d).map(|i| chol[(i, i)].ln()).sum();
        let df_d = d as f64;
        let log_const = ln_gamma(0.5 * (df + df_d)) - ln_gamma(0.5 * df)
            - 0.5 * df_d * (df * std::f64::consts::PI).ln()
            - log_det_half;
        Ok(MvStudentT {
            mean: DVector::from_column_slice(mean),
            chol,
            df,
            log_const,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let diff = DVector::from_column_slice(x) - &self.mean;
        let z = self
            .chol
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor has a positive diagonal");
        let q = z.norm_squared();
        self.log_const - 0.5 * (self.df + self.dim() as f64) * (q / self.df).ln_1p()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let d = self.dim();
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let w: f64 = ChiSquared::new(self.df).expect("positive df").sample(rng) / self.df;
        let x = &self.mean + &self.chol * z / w.sqrt();
        x.as_slice().to_vec()
    }
}

/// Settings for the tailored Metropolis-Hastings sampler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MhConfig {
    pub n_burn: usize,
    pub n_draws: usize,
    pub proposal_df: f64,
    pub seed: u64,
    pub mode: ModeConfig,
    pub tilt: TiltConfig,
}

impl Default for MhConfig {
    fn default() -> Self {
        MhConfig {
            n_burn: 1000,
            n_draws: 10000,
            proposal_df: 15.0,
            seed: 0,
            mode: ModeConfig::default(),
            tilt: TiltConfig::default(),
        }
    }
}

impl MhConfig {
    /// Short runs for smoke tests: 200 burn-in and 2000 kept draws.
    pub fn quick() -> Self {
        MhConfig {
            n_burn: 200,
            n_draws: 2000,
            ..MhConfig::default()
        }
    }

    /// Long runs used for posterior illustrations.
    pub fn illustration() -> Self {
        MhConfig {
            n_draws: 20000,
            ..MhConfig::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_draws == 0 {
            return Err(Error::Config("n_draws must be positive".into()));
        }
        if !(self.proposal_df > 2.0) {
            return Err(Error::Config(format!(
                "proposal_df must exceed 2, got {}",
                self.proposal_df
            )));
        }
        self.tilt.validate()
    }
}

/// Output of the sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub names: Vec<String>,
    /// Kept draws, one row per iteration.
    pub draws: DMatrix<f64>,
    pub log_post: Vec<f64>,
    pub accept_rate: f64,
    pub mode: Vec<f64>,
    pub mode_log_post: f64,
    pub v_hat: DMatrix<f64>,
    pub proposal_df: f64,
    pub seed: u64,
}

/// Posterior summary of one coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordSummary {
    pub name: String,
    pub mode: f64,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
    pub ess: f64,
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Batch-means variance of the mean with `batches` nonoverlapping batches.
pub(crate) fn batch_means_var(x: &[f64], batches: usize) -> f64 {
    let b = batches.min(x.len()).max(1);
    let size = x.len() / b;
    if size == 0 || b < 2 {
        return f64::NAN;
    }
    let means: Vec<f64> = (0..b)
        .map(|k| x[k * size..(k + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    let grand = means.iter().sum::<f64>() / b as f64;
    let var = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (b - 1) as f64;
    var / b as f64
}

impl Chain {
    pub fn dim(&self) -> usize {
        self.draws.ncols()
    }

    pub fn len(&self) -> usize {
        self.draws.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.nrows() == 0
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.draws.column(j).iter().copied().collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        (0..self.dim()).map(|j| self.draws.column(j).mean()).collect()
    }

    pub fn sd(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|j| {
                let c = self.draws.column(j);
                let m = c.mean();
                let n = c.len().max(2) as f64;
                (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            })
            .collect()
    }

    /// Effective sample size of coordinate `j` by 20 batch means.
    pub fn ess(&self, j: usize) -> f64 {
        let x = self.column(j);
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        let bm = batch_means_var(&x, 20);
        if !(bm > 0.0) {
            return n;
        }
        (var / bm).min(n)
    }

    pub fn summary(&self) -> Vec<CoordSummary> {
        let means = self.mean();
        let sds = self.sd();
        (0..self.dim())
            .map(|j| {
                let mut sorted = self.column(j);
                sorted.sort_by(|a, b| a.total_cmp(b));
                CoordSummary {
                    name: self.names[j].clone(),
                    mode: self.mode[j],
                    mean: means[j],
                    sd: sds[j],
                    q025: quantile(&sorted, 0.025),
                    q975: quantile(&sorted, 0.975),
                    ess: self.ess(j),
                }
            })
            .collect()
    }

    /// Writes one row per draw with the log posterior as the last column.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "iter,{},log_post", self.names.join(","))?;
        for i in 0..self.len() {
            write!(w, "{i}")?;
            for j in 0..self.dim() {
                write!(w, ",{}", self.draws[(i, j)])?;
            }
            writeln!(w, ",{}", self.log_post[i])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Tailored independence Metropolis-Hastings around a previously found mode.
///
/// Proposals come from a multivariate t with `cfg.proposal_df` degrees of
/// freedom centered at the mode with scale `mode.v_hat`. Infeasible proposals
/// are rejected, so the chain repeats its current state.
pub fn run_mh<T: Target + ?Sized>(t: &T, mode: &Mode, names: Vec<String>, cfg: &MhConfig) -> Result<Chain> {
    cfg.validate()?;
    let d = t.dim();
    if names.len() != d || mode.mode.len() != d {
        return Err(Error::Argument("dimension mismatch between target, mode and names".into()));
    }
    let proposal = MvStudentT::new(&mode.mode, &mode.v_hat, cfg.proposal_df)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cur = mode.mode.clone();
    let mut cur_lp = t.log_posterior(&cur);
    if !cur_lp.is_finite() {
        return Err(Error::Initialization("mode is outside the support".into()));
    }
    let mut cur_lq = proposal.log_pdf(&cur);
    let mut draws = DMatrix::zeros(cfg.n_draws, d);
    let mut log_post = Vec::with_capacity(cfg.n_draws);
    let mut accepted = 0usize;
    for it in 0..(cfg.n_burn + cfg.n_draws) {
        let prop = proposal.sample(&mut rng);
        let u: f64 = rng.gen();
        let lp = t.log_posterior(&prop);
        let kept = it >= cfg.n_burn;
        if lp.is_finite() {
            let lq = proposal.log_pdf(&prop);
            let log_ratio = (lp - lq) - (cur_lp - cur_lq);
            if u.ln() < log_ratio {
                cur = prop;
                cur_lp = lp;
                cur_lq = lq;
                if kept {
                    accepted += 1;
                }
            }
        }
        if kept {
            let row = it - cfg.n_burn;
            for j in 0..d {
                draws[(row, j)] = cur[j];
            }
            log_post.push(cur_lp);
        }
    }
    let accept_rate = accepted as f64 / cfg.n_draws as f64;
    if accept_rate < 0.01 {
        log::warn!("acceptance rate {accept_rate:.4} is below 0.01; the proposal does not match the posterior");
    }
    Ok(Chain {
        names,
        draws,
        log_post,
        accept_rate,
        mode: mode.mode.clone(),
        mode_log_post: mode.log_post,
        v_hat: mode.v_hat.clone(),
        proposal_df: cfg.proposal_df,
        seed: cfg.seed,
    })
}

/// Parameter names `beta_<x>`, `gamma_<z1>`, `v_<x>` for a model on a dataset.
pub fn param_names(model: &MomentModel, ds: &Dataset) -> Vec<String> {
    let s = ds.schema();
    let mut names = Vec::with_capacity(model.n_params());
    for (j, name) in s.x.iter().enumerate() {
        if model.coef_mask[j] {
            names.push(format!("beta_{name}"));
        }
    }
    for name in &s.z1 {
        names.push(format!("gamma_{name}"));
    }
    for j in model.free_v_indices() {
        names.push(format!("v_{}", s.x[j]));
    }
    names
}
