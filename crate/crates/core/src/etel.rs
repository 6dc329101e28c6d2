//! Exponential tilting of the empirical distribution.
//!
//! Given a moment matrix `G` (one row per observation block), the tilting
//! multiplier minimizes the convex dual `f(lambda) = mean_i exp(lambda'g_i)`,
//! and the implied weights `q_i ∝ exp(lambda'g_i)` are the KL-closest
//! reweighting of the empirical distribution that zeroes the weighted mean
//! moment. The log-ETEL is `sum_i log q_i`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Solver settings for [`solve_tilt`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TiltConfig {
    pub grad_tol: f64,
    pub max_iters: usize,
    pub lambda_cap: f64,
    pub armijo_c: f64,
    pub backtrack: f64,
}

impl Default for TiltConfig {
    fn default() -> Self {
        TiltConfig {
            grad_tol: 1e-10,
            max_iters: 100,
            lambda_cap: 1e4,
            armijo_c: 1e-4,
            backtrack: 0.5,
        }
    }
}

impl TiltConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.grad_tol > 0.0
            && self.max_iters > 0
            && self.lambda_cap > 0.0
            && self.armijo_c > 0.0
            && self.armijo_c < 1.0
            && self.backtrack > 0.0
            && self.backtrack < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid tilt configuration {self:?}")))
        }
    }
}

/// Result of a dual solve.
#[derive(Debug, Clone, PartialEq)]
pub struct TiltSolution {
    pub lambda: DVector<f64>,
    /// ETEL weights; `None` when infeasible.
    pub weights: Option<DVector<f64>>,
    /// `sum_i log q_i`; `None` when infeasible.
    pub log_etel: Option<f64>,
    pub feasible: bool,
    /// Final `max_j |sum_i q_i g_ij|`, the dual gradient divided by the dual objective.
    pub grad_norm: f64,
    pub iterations: usize,
}

/// Dual objective `f(lambda) = (1/n) sum_i exp(lambda'g_i)`.
pub fn dual_objective(g: &DMatrix<f64>, lambda: &DVector<f64>) -> f64 {
    let s = g * lambda;
    s.iter().map(|v| v.exp()).sum::<f64>() / g.nrows() as f64
}

/// Analytic dual gradient `(1/n) sum_i exp(lambda'g_i) g_i`.
pub fn dual_gradient(g: &DMatrix<f64>, lambda: &DVector<f64>) -> DVector<f64> {
    let e = (g * lambda).map(f64::exp);
    g.transpose() * e / g.nrows() as f64
}

struct Tilt {
    /// `log f(lambda)`
    log_f: f64,
    /// normalized weights
    q: DVector<f64>,
    /// `log q_i`
    log_q: DVector<f64>,
}

fn tilt(g: &DMatrix<f64>, lambda: &DVector<f64>) -> Tilt {
    let s = g * lambda;
    let smax = s.max();
    let e = s.map(|v| (v - smax).exp());
    let sum = e.sum();
    let log_sum = sum.ln();
    let n = g.nrows() as f64;
    Tilt {
        log_f: smax + log_sum - n.ln(),
        q: e / sum,
        log_q: s.map(|v| v - smax - log_sum),
    }
}

fn weighted_moments(g: &DMatrix<f64>, q: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let d = g.ncols();
    let grad = g.transpose() * q;
    let mut hess = DMatrix::zeros(d, d);
    for a in 0..d {
        let ca = g.column(a);
        for b in a..d {
            let cb = g.column(b);
            let v: f64 = (0..g.nrows()).map(|i| q[i] * ca[i] * cb[i]).sum();
            hess[(a, b)] = v;
            hess[(b, a)] = v;
        }
    }
    (grad, hess)
}

fn newton_direction(hess: &DMatrix<f64>, grad: &DVector<f64>) -> Option<DVector<f64>> {
    let d = hess.nrows() as f64;
    let tr = hess.trace();
    let mut h = hess.clone();
    let min_diag = (0..hess.nrows()).map(|i| hess[(i, i)]).fold(f64::INFINITY, f64::min);
    if min_diag <= 1e-12 * tr / d {
        for i in 0..hess.nrows() {
            h[(i, i)] += 1e-10 * tr / d;
        }
    }
    linalg::spd_solve(&h, &(-grad), 1e-10)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// `min_lambda log f(lambda) + (mu / 2) |lambda|^2`.
///
/// Finite for every moment matrix. Inside the hull it approaches the
/// log of the dual minimum as `mu` shrinks; outside it behaves like minus the
/// squared distance from zero to the hull over `2 mu`.
pub fn ridge_dual_value(g: &DMatrix<f64>, mu: f64) -> f64 {
    let d = g.ncols();
    let value = |l: &DVector<f64>| tilt(g, l).log_f + 0.5 * mu * l.norm_squared();
    let mut lambda = DVector::zeros(d);
    let mut f = value(&lambda);
    for _ in 0..200 {
        let t = tilt(g, &lambda);
        let (m, second) = weighted_moments(g, &t.q);
        let grad = &m + &lambda * mu;
        if grad.amax() <= 1e-12 * (1.0 + g.amax()) {
            break;
        }
        let mut hess = second - &m * m.transpose();
        for i in 0..d {
            hess[(i, i)] += mu;
        }
        let Some(dir) = linalg::spd_solve(&hess, &(-&grad), 1e-12) else {
            break;
        };
        let slope = grad.dot(&dir);
        let mut step = 1.0;
        let mut moved = false;
        while step > 1e-12 {
            let cand = &lambda + &dir * step;
            let fc = value(&cand);
            if fc <= f + 1e-4 * step * slope {
                lambda = cand;
                f = fc;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    f
}

/// Solves the ETEL dual by damped Newton from `lambda = 0`.
///
/// Convergence is declared when `max_j |sum_i q_i g_ij| <= grad_tol * (1 + max|g|)`.
/// The instance is classified infeasible (zero not in the interior of the
/// convex hull of the rows) when `|lambda|` exceeds
/// `lambda_cap * (1 + 1 / median row norm)` or when the iteration budget runs
/// out. Log weights stay finite even where a weight itself underflows to zero in
/// floating point; `log_etel` is accumulated from them.
pub fn solve_tilt(g: &DMatrix<f64>, cfg: &TiltConfig) -> Result<TiltSolution> {
    let (n, d) = g.shape();
    if d == 0 {
        return Err(Error::Argument("moment dimension is zero".into()));
    }
    if n == 0 {
        return Err(Error::Argument("moment matrix has no rows".into()));
    }
    if !g.iter().all(|v| v.is_finite()) {
        return Err(Error::Argument("moment matrix has non-finite entries".into()));
    }
    if n < d {
        log::warn!("tilting with fewer rows ({n}) than moments ({d})");
    }
    let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = cfg.grad_tol * (1.0 + gmax);
    let med = median(g.row_iter().map(|r| r.norm()).collect());
    let cap = cfg.lambda_cap * (1.0 + 1.0 / med);

    let mut lambda = DVector::zeros(d);
    let mut cur = tilt(g, &lambda);
    let mut iterations = 0;
    let mut converged = false;
    let mut grad_norm;
    loop {
        let (grad, hess) = weighted_moments(g, &cur.q);
        grad_norm = grad.amax();
        if grad_norm <= tol {
            converged = true;
            // one extra full step to tighten the constraint residual
            if let Some(step) = newton_direction(&hess, &grad) {
                let trial_lambda = &lambda + &step;
                let trial = tilt(g, &trial_lambda);
                let trial_norm = (g.transpose() * &trial.q).amax();
                if trial.log_f.is_finite() && trial_norm < grad_norm {
                    lambda = trial_lambda;
                    cur = trial;
                    grad_norm = trial_norm;
                }
            }
            break;
        }
        if iterations >= cfg.max_iters {
            break;
        }
        iterations += 1;
        let Some(step) = newton_direction(&hess, &grad) else {
            break;
        };
        let slope = grad.dot(&step);
        if !(slope < 0.0) {
            break;
        }
        let mut accepted = None;
        if -slope < 1e-12 {
            let trial_lambda = &lambda + &step;
            let trial = tilt(g, &trial_lambda);
            if trial.log_f.is_finite() && (g.transpose() * &trial.q).amax() < grad_norm {
                accepted = Some((trial_lambda, trial));
            }
        }
        let mut t = 1.0;
        while accepted.is_none() && t > 1e-20 {
            let trial_lambda = &lambda + &step * t;
            let trial = tilt(g, &trial_lambda);
            if !trial.log_f.is_finite() {
                return Err(Error::Numeric(format!(
                    "dual objective is not finite at iteration {iterations}"
                )));
            }
            if trial.log_f <= cur.log_f + cfg.armijo_c * t * slope {
                accepted = Some((trial_lambda, trial));
                break;
            }
            t *= cfg.backtrack;
        }
        let Some((new_lambda, new_tilt)) = accepted else {
            break;
        };
        lambda = new_lambda;
        cur = new_tilt;
        if lambda.norm() > cap {
            break;
        }
    }

    let feasible = converged && lambda.norm() <= cap && cur.log_q.iter().all(|v| v.is_finite());
    if !feasible {
        return Ok(TiltSolution {
            lambda,
            weights: None,
            log_etel: None,
            feasible: false,
            grad_norm,
            iterations,
        });
    }
    let log_etel = cur.log_q.sum();
    Ok(TiltSolution {
        lambda,
        weights: Some(cur.q),
        log_etel: Some(log_etel),
        feasible: true,
        grad_norm,
        iterations,
    })
}

/// Log-ETEL alone; `None` when infeasible or the solve fails numerically.
pub fn log_etel(g: &DMatrix<f64>, cfg: &TiltConfig) -> Option<f64> {
    solve_tilt(g, cfg).ok().and_then(|s| s.log_etel)
}

/// Discrepancy between `sum_i log q_i` and the closed form
/// `-n log n + sum_i lambda'g_i - n log(mean_j exp(lambda'g_j))`.
pub fn log_etel_identity_check(sol: &TiltSolution, g: &DMatrix<f64>) -> Result<f64> {
    let weights = sol
        .weights
        .as_ref()
        .filter(|_| sol.feasible)
        .ok_or_else(|| Error::Contract("identity check requires a feasible solution".into()))?;
    if weights.len() != g.nrows() || sol.lambda.len() != g.ncols() {
        return Err(Error::Argument("solution does not match moment matrix".into()));
    }
    let n = g.nrows() as f64;
    let lhs: f64 = weights.iter().map(|w| w.ln()).sum();
    let s = g * &sol.lambda;
    let smax = s.max();
    let log_mean = smax + (s.iter().map(|v| (v - smax).exp()).sum::<f64>() / n).ln();
    let rhs = -n * n.ln() + s.sum() - n * log_mean;
    Ok((lhs - rhs).abs())
}

/// KL objective `sum_i q_i log(n q_i)`.
pub fn kl_objective(q: &DVector<f64>) -> f64 {
    let n = q.len() as f64;
    q.iter().map(|&v| if v > 0.0 { v * (n * v).ln() } else { 0.0 }).sum()
}

/// Reference solver for tiny instances working directly on the primal
/// problem `min sum q_i log(n q_i)` subject to `sum q_i = 1`, `sum q_i g_i = 0`,
/// `q > 0`. It never touches the dual multiplier.
///
/// Phase one maximizes the smallest weight over the affine constraint set
/// (a smoothed max-min with decreasing temperature); the instance is
/// infeasible unless that value is positive. Phase two runs a damped Newton
/// method on the null-space parametrization `q = q0 + N t`.
pub fn primal_oracle(g: &DMatrix<f64>) -> Result<DVector<f64>> {
    let (n, d) = g.shape();
    if n == 0 || d == 0 || n > 8 || d > 2 {
        return Err(Error::Argument(format!(
            "primal oracle supports 1 <= n <= 8 and 1 <= d <= 2, got {n} x {d}"
        )));
    }
    let mut a = DMatrix::zeros(d + 1, n);
    a.row_mut(0).fill(1.0);
    for j in 0..d {
        a.row_mut(j + 1).copy_from(&g.column(j).transpose());
    }
    let mut b = DVector::zeros(d + 1);
    b[0] = 1.0;

    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max().max(1.0);
    let q0 = svd.solve(&b, 1e-12 * smax).map_err(|e| Error::Numeric(e.to_string()))?;
    if (&a * &q0 - &b).amax() > 1e-10 {
        return Err(Error::Infeasible("moment constraints are inconsistent".into()));
    }
    // eigenvectors of A'A with zero eigenvalue span the null space of A
    let eig = (a.transpose() * &a).symmetric_eigen();
    let emax = eig.eigenvalues.max().max(1.0);
    let keep: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] <= 1e-12 * emax).collect();
    let null = DMatrix::from_fn(n, keep.len(), |i, j| eig.eigenvectors[(i, keep[j])]);
    let r = null.ncols();
    if r == 0 {
        return if q0.iter().all(|&v| v > 1e-12) {
            Ok(q0)
        } else {
            Err(Error::Infeasible("unique constrained point is not interior".into()))
        };
    }

    // phase one
    let mut t = DVector::zeros(r);
    let min_q = |t: &DVector<f64>| (&q0 + &null * t).min();
    let mut tau = 0.1;
    while tau > 1e-7 {
        for _ in 0..200 {
            let q = &q0 + &null * &t;
            let qmin = q.min();
            let w = q.map(|v| (-(v - qmin) / tau).exp());
            let sw = w.sum();
            let p = &w / sw;
            // soft-min value -tau log sum exp(-q/tau)
            let val = qmin - tau * sw.ln();
            let grad = null.transpose() * &p;
            let mut cov = DMatrix::zeros(n, n);
            for i in 0..n {
                cov[(i, i)] = p[i];
            }
            cov -= &p * p.transpose();
            let hess = null.transpose() * (cov / tau) * &null;
            let mut h = hess;
            for i in 0..r {
                h[(i, i)] += 1e-12;
            }
            let step = linalg::spd_solve(&h, &grad, 1e-10).unwrap_or_else(|| grad.clone());
            let mut s = 1.0;
            let mut moved = false;
            while s > 1e-14 {
                let tn = &t + &step * s;
                let qn = &q0 + &null * &tn;
                let mn = qn.min();
                let vn = mn - tau * qn.map(|v| (-(v - mn) / tau).exp()).sum().ln();
                if vn >= val + 1e-4 * s * grad.dot(&step) {
                    t = tn;
                    moved = true;
                    break;
                }
                s *= 0.5;
            }
            if !moved || grad.dot(&step) < 1e-16 {
                break;
            }
        }
        if min_q(&t) > 1e-3 {
            break;
        }
        tau *= 0.1;
    }
    let margin = min_q(&t);
    if !(margin > 1e-9) {
        return Err(Error::Infeasible(format!(
            "largest attainable minimum weight is {margin:.3e}"
        )));
    }

    // phase two
    for _ in 0..500 {
        let q = &q0 + &null * &t;
        let f = kl_objective(&q);
        let nn = n as f64;
        let grad = null.transpose() * q.map(|v| (nn * v).ln() + 1.0);
        let hess = null.transpose() * DMatrix::from_diagonal(&q.map(|v| 1.0 / v)) * &null;
        let Some(step) = linalg::spd_solve(&hess, &(-&grad), 1e-12) else {
            break;
        };
        let decrement = -grad.dot(&step);
        if decrement < 1e-20 {
            break;
        }
        let mut s = 1.0;
        loop {
            let tn = &t + &step * s;
            let qn = &q0 + &null * &tn;
            if qn.min() > 0.0 && kl_objective(&qn) <= f - 1e-4 * s * decrement {
                t = tn;
                break;
            }
            s *= 0.5;
            if s < 1e-16 {
                break;
            }
        }
        if s < 1e-16 {
            break;
        }
    }
    Ok(&q0 + &null * &t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn symmetric_instance() {
        let g = col(&[1.0, -1.0]);
        let s = solve_tilt(&g, &TiltConfig::default()).unwrap();
        assert!(s.feasible);
        assert!(s.lambda[0].abs() < 1e-14);
        let w = s.weights.unwrap();
        assert!((w[0] - 0.5).abs() < 1e-14 && (w[1] - 0.5).abs() < 1e-14);
        assert!((s.log_etel.unwrap() + 2.0 * 2f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn three_point_instance() {
        let g = col(&[-1.0, 0.0, 2.0]);
        let s = solve_tilt(&g, &TiltConfig::default()).unwrap();
        assert!(s.feasible);
        assert!((s.lambda[0] - -0.23104906018664845).abs() < 1e-12);
        let w = s.weights.as_ref().unwrap();
        let expect = [0.43597671, 0.34603494, 0.21798835];
        for (a, b) in w.iter().zip(expect) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!((s.log_etel.unwrap() - -3.4146956313512176).abs() < 1e-12);
        let resid: f64 = w.iter().zip(g.iter()).map(|(q, g)| q * g).sum();
        assert!(resid.abs() < 1e-12);
        assert!(log_etel_identity_check(&s, &g).unwrap() <= 1e-12);
    }

    #[test]
    fn ridge_value_limits() {
        let g = col(&[-1.0, 0.0, 2.0]);
        let lam = DVector::from_element(1, -0.23104906018664845);
        let exact = dual_objective(&g, &lam).ln();
        assert!((ridge_dual_value(&g, 1e-9) - exact).abs() < 1e-6);
        let near = ridge_dual_value(&col(&[1.0, 2.0, 3.0]), 0.1);
        let far = ridge_dual_value(&col(&[2.0, 3.0, 4.0]), 0.1);
        assert!(near.is_finite() && far < near);
        assert!((far - (-20.0 - 3f64.ln())).abs() < 1e-6);
    }

    #[test]
    fn zero_outside_hull_is_infeasible() {
        let s = solve_tilt(&col(&[1.0, 2.0, 3.0]), &TiltConfig::default()).unwrap();
        assert!(!s.feasible);
        assert!(s.weights.is_none() && s.log_etel.is_none());
        assert!(s.iterations > 0);
    }

    #[test]
    fn zero_mean_gives_uniform() {
        let g = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, -1.0, 0.5, 2.0, -3.0, -2.0, 0.5]);
        let s = solve_tilt(&g, &TiltConfig::default()).unwrap();
        assert!(s.lambda.amax() < 1e-15);
        let n = 4f64;
        assert!((s.log_etel.unwrap() + n * n.ln()).abs() < 1e-12);
        assert_eq!(log_etel_identity_check(&s, &g).unwrap(), 0.0);
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(matches!(
            solve_tilt(&DMatrix::zeros(3, 0), &TiltConfig::default()),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn identity_check_requires_feasible() {
        let g = col(&[1.0, 2.0]);
        let s = solve_tilt(&g, &TiltConfig::default()).unwrap();
        assert!(matches!(log_etel_identity_check(&s, &g), Err(Error::Contract(_))));
    }

    #[test]
    fn oracle_small_instances() {
        let w = primal_oracle(&col(&[1.0, -1.0])).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-8);
        let g = col(&[-1.0, 0.0, 2.0]);
        let w = primal_oracle(&g).unwrap();
        let dual = solve_tilt(&g, &TiltConfig::default()).unwrap().weights.unwrap();
        assert!((w - dual).amax() < 1e-4);
        assert!(matches!(primal_oracle(&col(&[1.0, 2.0, 3.0])), Err(Error::Infeasible(_))));
    }

    #[test]
    fn oracle_strong_duality() {
        let g = col(&[-2.0, -1.0, 1.0, 3.0]);
        let q = primal_oracle(&g).unwrap();
        assert!((q.sum() - 1.0).abs() < 1e-10);
        assert!(q.dot(&g.column(0)).abs() < 1e-10);
        let s = solve_tilt(&g, &TiltConfig::default()).unwrap();
        // dual-implied value of the primal: -log f(lambda)
        let dual_value = -dual_objective(&g, &s.lambda).ln();
        assert!(kl_objective(&q) <= dual_value + 1e-8);
        assert!((kl_objective(&q) - dual_value).abs() < 1e-8);
    }

    #[test]
    fn scaling_invariance() {
        let g = DMatrix::from_row_slice(5, 2, &[1.0, 0.3, -0.5, 1.2, 0.2, -0.8, -1.1, 0.1, 0.7, -0.4]);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 0.01]));
        let a = solve_tilt(&g, &TiltConfig::default()).unwrap();
        let b = solve_tilt(&(&g * &d), &TiltConfig::default()).unwrap();
        assert!((a.weights.unwrap() - b.weights.unwrap()).amax() < 1e-8);
        assert!((a.log_etel.unwrap() - b.log_etel.unwrap()).abs() < 1e-8);
        let mapped = d.try_inverse().unwrap() * &a.lambda;
        assert!((mapped - b.lambda).amax() < 1e-8 * (1.0 + a.lambda.amax() * 100.0));
    }

    fn interior_instance(rows: Vec<f64>, mix: Vec<f64>, d: usize) -> DMatrix<f64> {
        let n = mix.len();
        let raw = DMatrix::from_row_slice(n, d, &rows[..n * d]);
        let total: f64 = mix.iter().sum();
        let center = raw.transpose() * DVector::from_vec(mix) / total;
        DMatrix::from_fn(n, d, |i, j| raw[(i, j)] - center[j])
    }

    proptest! {
        #[test]
        fn gradient_matches_finite_differences(
            rows in prop::collection::vec(-2.0f64..2.0, 12),
            lam in prop::collection::vec(-1.0f64..1.0, 2),
        ) {
            let g = DMatrix::from_row_slice(6, 2, &rows);
            let l = DVector::from_vec(lam);
            let grad = dual_gradient(&g, &l);
            for j in 0..2 {
                let h = 1e-6;
                let mut up = l.clone();
                let mut dn = l.clone();
                up[j] += h;
                dn[j] -= h;
                let fd = (dual_objective(&g, &up) - dual_objective(&g, &dn)) / (2.0 * h);
                prop_assert!((fd - grad[j]).abs() <= 1e-6 * (1.0 + grad[j].abs()));
            }
        }

        #[test]
        fn feasible_solutions_satisfy_invariants(
            rows in prop::collection::vec(-3.0f64..3.0, 40),
            mix in prop::collection::vec(0.2f64..1.0, 20),
        ) {
            let g = interior_instance(rows, mix, 2);
            let s = solve_tilt(&g, &TiltConfig::default()).unwrap();
            prop_assert!(s.feasible);
            let w = s.weights.clone().unwrap();
            prop_assert!(w.iter().all(|&v| v > 0.0));
            prop_assert!((w.sum() - 1.0).abs() <= 1e-12);
            let gmax = g.amax();
            let resid = g.transpose() * &w;
            prop_assert!(resid.amax() <= 1e-8 * (1.0 + gmax));
            let direct: f64 = w.iter().map(|v| v.ln()).sum();
            prop_assert!((direct - s.log_etel.unwrap()).abs() <= 1e-10 * direct.abs());
            prop_assert!(log_etel_identity_check(&s, &g).unwrap() <= 1e-9 * 20.0);
        }

        #[test]
        fn weights_are_kl_optimal(
            rows in prop::collection::vec(-3.0f64..3.0, 12),
            mix in prop::collection::vec(0.2f64..1.0, 6),
            dir in prop::collection::vec(-1.0f64..1.0, 6),
        ) {
            let g = interior_instance(rows, mix, 2);
            let s = solve_tilt(&g, &TiltConfig::default()).unwrap();
            let q = s.weights.unwrap();
            // project a random direction onto the null space of the constraints
            let mut a = DMatrix::zeros(3, 6);
            a.row_mut(0).fill(1.0);
            a.row_mut(1).copy_from(&g.column(0).transpose());
            a.row_mut(2).copy_from(&g.column(1).transpose());
            let dvec = DVector::from_vec(dir);
            let aat = &a * a.transpose();
            if let Some(inv) = aat.try_inverse() {
                let proj = &dvec - a.transpose() * (inv * (&a * &dvec));
                let scale = 0.5 * q.min() / proj.amax().max(1e-12);
                let other = &q + proj * scale;
                prop_assert!(other.min() > 0.0);
                prop_assert!(kl_objective(&q) <= kl_objective(&other) + 1e-8);
            }
        }
    }
}
