//! Frequentist baselines: 2SLS, two-step efficient GMM, the J statistic and
//! the GMM moment selection criteria.
//!
//! Because the moments are linear, the mean moment is `b - A theta - S v`.
//! Free `v` components are concentrated out: `v_hat(theta)` equals the mean
//! of the masked moment coordinates, which zeroes them, so `theta` is fitted on
//! the remaining `d - k` coordinates alone.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::moments::{MomentEvaluator, MomentModel, ParamVector};

/// A fitted linear GMM model.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: MomentModel,
    pub estimate: ParamVector,
    /// Estimator covariance (already divided by the number of blocks), in
    /// `(theta, v_free)` order.
    pub asy_cov: DMatrix<f64>,
    pub std_errors: Vec<f64>,
    pub j_stat: f64,
    pub df: usize,
    /// Weight matrix on the unrestricted moment coordinates.
    pub weight: DMatrix<f64>,
    /// Number of observation blocks used.
    pub n: usize,
    /// True if the weight matrix needed a ridge.
    pub ridged: bool,
}

impl GmmFit {
    /// Upper-tail chi-square p-value of `J`; `None` for just-identified models.
    pub fn j_pvalue(&self) -> Option<f64> {
        if self.df == 0 {
            return None;
        }
        let chi = ChiSquared::new(self.df as f64).ok()?;
        Some(chi.sf(self.j_stat))
    }
}

struct Parts {
    b_u: DVector<f64>,
    a_u: DMatrix<f64>,
    a_m: DMatrix<f64>,
    b_m: DVector<f64>,
    unmasked: Vec<usize>,
    masked: Vec<usize>,
}

fn parts(ev: &MomentEvaluator) -> Parts {
    let model = ev.model();
    let (b, a) = ev.linear_form();
    let masked = model.free_v_indices();
    let unmasked: Vec<usize> = (0..model.moment_dim()).filter(|j| !masked.contains(j)).collect();
    Parts {
        b_u: b.select_rows(&unmasked),
        a_u: a.select_rows(&unmasked),
        a_m: a.select_rows(&masked),
        b_m: b.select_rows(&masked),
        unmasked,
        masked,
    }
}

fn weighted_ls(a: &DMatrix<f64>, b: &DVector<f64>, w: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let awa = a.transpose() * w * a;
    let scale = awa.diagonal().amax().max(f64::MIN_POSITIVE);
    let eig = awa.clone().symmetric_eigen();
    if !(eig.eigenvalues.min() > 1e-12 * scale) {
        return Err(Error::Identification(format!(
            "moment Jacobian is rank deficient (smallest eigenvalue {:.3e} of {:.3e})",
            eig.eigenvalues.min(),
            scale
        )));
    }
    let inv = awa
        .cholesky()
        .ok_or_else(|| Error::Identification("moment Jacobian is rank deficient".into()))?
        .inverse();
    let theta = &inv * a.transpose() * w * b;
    Ok((theta, inv))
}

/// Centered outer product of the block moments at `params`.
fn omega(ev: &MomentEvaluator, params: &ParamVector) -> DMatrix<f64> {
    let g = ev.matrix(params);
    let mean = linalg::col_means(&g);
    let mut centered = g;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut om = centered.transpose() * &centered / centered.nrows() as f64;
    linalg::symmetrize(&mut om);
    om
}

fn finish(
    ev: &MomentEvaluator,
    pr: &Parts,
    theta: DVector<f64>,
    bread: &DMatrix<f64>,
    w: DMatrix<f64>,
    ridged: bool,
) -> GmmFit {
    let model = ev.model().clone();
    let (d, p, k) = (model.moment_dim(), model.n_theta(), model.n_free_v());
    let v = &pr.b_m - &pr.a_m * &theta;
    let estimate = ParamVector::new(theta.as_slice().to_vec(), v.as_slice().to_vec());
    let nb = ev.n_blocks();
    let gbar_u = &pr.b_u - &pr.a_u * &theta;
    let j_stat = (nb as f64 * gbar_u.dot(&(&w * &gbar_u))).max(0.0);

    // influence of the full mean moment on (theta, v)
    let a_theta_u = bread * pr.a_u.transpose() * &w;
    let mut infl = DMatrix::zeros(p + k, d);
    for (c, &j) in pr.unmasked.iter().enumerate() {
        infl.view_mut((0, j), (p, 1)).copy_from(&a_theta_u.column(c));
    }
    let a_theta = infl.rows(0, p).into_owned();
    let a_v = -&pr.a_m * &a_theta;
    infl.rows_mut(p, k).copy_from(&a_v);
    for (slot, &j) in pr.masked.iter().enumerate() {
        infl[(p + slot, j)] += 1.0;
    }
    let om = omega(ev, &estimate);
    let mut asy_cov = &infl * om * infl.transpose() / nb as f64;
    linalg::symmetrize(&mut asy_cov);
    let std_errors = asy_cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect();
    GmmFit {
        df: model.overid_df(),
        model,
        estimate,
        asy_cov,
        std_errors,
        j_stat,
        weight: w,
        n: nb,
        ridged,
    }
}

fn check_size(ev: &MomentEvaluator) -> Result<()> {
    let d = ev.model().moment_dim();
    if ev.n_blocks() <= d {
        return Err(Error::Size(format!(
            "GMM needs more than {d} observation blocks, got {}",
            ev.n_blocks()
        )));
    }
    Ok(())
}

fn tsls_weight(ev: &MomentEvaluator, pr: &Parts) -> Result<DMatrix<f64>> {
    let z = ev.instruments().select_columns(&pr.unmasked);
    let zz = z.transpose() * &z / ev.n_rows() as f64;
    linalg::spd_inverse(&zz, 1e-10)
        .map(|(inv, _)| inv)
        .ok_or_else(|| Error::Conditioning("instrument cross-product is singular".into()))
}

/// One-step GMM with the 2SLS weight `(Z'Z/n)^-1` on the unrestricted
/// moments; the covariance is the heteroskedasticity-robust sandwich.
pub fn two_sls(model: &MomentModel, ds: &Dataset) -> Result<GmmFit> {
    let ev = MomentEvaluator::new(model, ds)?;
    check_size(&ev)?;
    let pr = parts(&ev);
    let w = tsls_weight(&ev, &pr)?;
    let (theta, bread) = weighted_ls(&pr.a_u, &pr.b_u, &w)?;
    Ok(finish(&ev, &pr, theta, &bread, w, false))
}

/// Two-step efficient GMM.
///
/// Step one uses the 2SLS weight. Step two uses the inverse of the centered
/// moment covariance at the step-one estimate, with a `1e-10` relative ridge
/// if that matrix is singular.
pub fn two_step_gmm(model: &MomentModel, ds: &Dataset) -> Result<GmmFit> {
    let ev = MomentEvaluator::new(model, ds)?;
    check_size(&ev)?;
    let pr = parts(&ev);
    let w1 = tsls_weight(&ev, &pr)?;
    let (theta1, _) = weighted_ls(&pr.a_u, &pr.b_u, &w1)?;
    let v1 = &pr.b_m - &pr.a_m * &theta1;
    let step1 = ParamVector::new(theta1.as_slice().to_vec(), v1.as_slice().to_vec());
    let om = omega(&ev, &step1);
    let om_u = om.select_rows(&pr.unmasked).select_columns(&pr.unmasked);
    let z = ev.instruments().select_columns(&pr.unmasked);
    let reference = (z.norm_squared() / ev.n_rows() as f64) * (ev.y().norm_squared() / ev.n_rows() as f64);
    if om_u.trace() <= 1e-20 * reference {
        log::warn!("{}: moments fit exactly; keeping the 2SLS weight", model.label());
        let (theta, bread) = weighted_ls(&pr.a_u, &pr.b_u, &w1)?;
        return Ok(finish(&ev, &pr, theta, &bread, w1, false));
    }
    let (w, ridged) = match linalg::spd_inverse(&om_u, 1e-10) {
        Some(x) => x,
        None => return Err(Error::Conditioning("moment covariance is singular even with a ridge".into())),
    };
    if ridged {
        log::warn!("{}: moment covariance is singular; using a ridge", model.label());
    }
    let (theta, bread) = weighted_ls(&pr.a_u, &pr.b_u, &w)?;
    Ok(finish(&ev, &pr, theta, &bread, w, ridged))
}

/// `(GMM-BIC, GMM-AIC, GMM-HQIC)` for a J statistic with `df`
/// overidentifying restrictions and sample size `n`.
pub fn msc_values(j: f64, df: usize, n: usize) -> (f64, f64, f64) {
    let df = df as f64;
    let ln_n = (n as f64).ln();
    (j - df * ln_n, j - 2.0 * df, j - 2.01 * df * ln_n.ln())
}

/// One row of a moment selection report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MscEntry {
    pub label: String,
    pub mask: String,
    pub j_stat: f64,
    pub df: usize,
    pub gmm_bic: f64,
    pub gmm_aic: f64,
    pub gmm_hqic: f64,
}

/// GMM moment selection criteria across candidate models; each criterion
/// selects its minimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MscReport {
    pub n: usize,
    pub entries: Vec<MscEntry>,
    pub selected_bic: usize,
    pub selected_aic: usize,
    pub selected_hqic: usize,
}

impl MscReport {
    pub fn selected_label(&self, criterion: &str) -> Option<&str> {
        let idx = match criterion {
            "bic" => self.selected_bic,
            "aic" => self.selected_aic,
            "hqic" => self.selected_hqic,
            _ => return None,
        };
        Some(&self.entries[idx].label)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        writeln!(f)?;
        Ok(())
    }

    /// One row per model with its criteria and 0/1 selection flags.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "label", "mask", "j_stat", "df", "gmm_bic", "gmm_aic", "gmm_hqic", "sel_bic", "sel_aic", "sel_hqic",
        ])?;
        for (i, e) in self.entries.iter().enumerate() {
            let flag = |k: usize| if k == i { "1" } else { "0" }.to_string();
            w.write_record([
                e.label.clone(),
                e.mask.clone(),
                e.j_stat.to_string(),
                e.df.to_string(),
                e.gmm_bic.to_string(),
                e.gmm_aic.to_string(),
                e.gmm_hqic.to_string(),
                flag(self.selected_bic),
                flag(self.selected_aic),
                flag(self.selected_hqic),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn argmin_prefer_df(entries: &[MscEntry], key: impl Fn(&MscEntry) -> f64) -> usize {
    let mut best = 0;
    for (i, e) in entries.iter().enumerate().skip(1) {
        let (a, b) = (key(e), key(&entries[best]));
        let tie = (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()));
        if (!tie && a < b) || (tie && e.df > entries[best].df) {
            best = i;
        }
    }
    best
}

/// Builds the selection report from fitted models on a sample of size `n`.
pub fn msc_criteria(fits: &[GmmFit], n: usize) -> Result<MscReport> {
    if fits.is_empty() {
        return Err(Error::Argument("no fits supplied".into()));
    }
    let entries: Vec<MscEntry> = fits
        .iter()
        .map(|f| {
            let (bic, aic, hqic) = msc_values(f.j_stat, f.df, n);
            MscEntry {
                label: f.model.label(),
                mask: f.model.mask_bits(),
                j_stat: f.j_stat,
                df: f.df,
                gmm_bic: bic,
                gmm_aic: aic,
                gmm_hqic: hqic,
            }
        })
        .collect();
    Ok(MscReport {
        n,
        selected_bic: argmin_prefer_df(&entries, |e| e.gmm_bic),
        selected_aic: argmin_prefer_df(&entries, |e| e.gmm_aic),
        selected_hqic: argmin_prefer_df(&entries, |e| e.gmm_hqic),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oracle_data() -> Dataset {
        let y = [2.1, 0.3, 3.7, 1.9, -0.4, 2.8, 1.2, 4.1];
        let x = [1.0, -0.5, 2.2, 0.7, -1.1, 1.6, 0.2, 2.9];
        let z1 = [0.3, -1.2, 0.8, 0.1, -0.6, 1.4, -0.2, 0.5];
        let z2 = [0.9, -0.7, 1.5, 0.4, -1.3, 0.6, 0.1, 2.0];
        Dataset::from_columns(
            DVector::from_row_slice(&y),
            DMatrix::from_column_slice(8, 1, &x),
            DMatrix::from_fn(8, 2, |i, j| if j == 0 { 1.0 } else { z1[i] }),
            DMatrix::from_column_slice(8, 1, &z2),
        )
        .unwrap()
    }

    #[test]
    fn worked_instance_base() {
        let ds = oracle_data();
        let fit = two_step_gmm(&MomentModel::base(&ds).unwrap(), &ds).unwrap();
        let expect = [1.1613226855043737, 0.9762946814281893, 0.09117387099226462];
        for (a, b) in fit.estimate.theta.iter().zip(expect) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        assert!((fit.j_stat - 7.099857039117655).abs() < 1e-8);
        assert_eq!(fit.df, 1);
    }

    #[test]
    fn worked_instance_extended() {
        let ds = oracle_data();
        let fit = two_step_gmm(&MomentModel::extended(&ds).unwrap(), &ds).unwrap();
        let expect = [1.1339604586834537, 0.9602181517754906, 0.07321052273808865];
        for (a, b) in fit.estimate.theta.iter().zip(expect) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        assert!((fit.estimate.v_free[0] - -0.0106732207191888).abs() < 1e-9);
        assert!(fit.j_stat < 1e-20);
        assert_eq!(fit.df, 0);
    }

    #[test]
    fn concentrated_rows_vanish() {
        let ds = oracle_data();
        let m = MomentModel::extended(&ds).unwrap();
        let fit = two_step_gmm(&m, &ds).unwrap();
        let g = crate::moments::moment_matrix(&m, &ds, &fit.estimate).unwrap();
        assert!(linalg::col_means(&g)[0].abs() <= 1e-10);
        // v_hat is the sample covariance of x with the fitted residual
        let ev = MomentEvaluator::new(&m, &ds).unwrap();
        let e = ev.residuals(&fit.estimate.theta);
        let direct = (0..8).map(|i| e[i] * ds.x()[(i, 0)]).sum::<f64>() / 8.0;
        assert!((direct - fit.estimate.v_free[0]).abs() < 1e-12);
    }

    #[test]
    fn noiseless_fit_is_exact() {
        let n = 40;
        let f = |i: usize, s: usize| ((i * 31 + s * 17) % 23) as f64 / 7.0 - 1.6;
        let z1 = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { f(i, 1) });
        let z2 = DMatrix::from_fn(n, 2, |i, j| f(i, 2 + j));
        let x = DMatrix::from_fn(n, 1, |i, _| 0.5 * z2[(i, 0)] - z2[(i, 1)] + 0.3 * f(i, 9));
        let y = DVector::from_fn(n, |i, _| 2.0 * x[(i, 0)] + 1.0 - 0.5 * z1[(i, 1)]);
        let ds = Dataset::from_columns(y, x, z1, z2).unwrap();
        let fit = two_step_gmm(&MomentModel::base(&ds).unwrap(), &ds).unwrap();
        assert!((fit.estimate.theta[0] - 2.0).abs() < 1e-10);
        assert!((fit.estimate.theta[1] - 1.0).abs() < 1e-10);
        assert!((fit.estimate.theta[2] + 0.5).abs() < 1e-10);
        assert!(fit.j_stat < 1e-12);
    }

    #[test]
    fn rank_deficiency_detected() {
        let n = 20;
        let z2 = DMatrix::from_fn(n, 1, |i, _| i as f64);
        let x = DMatrix::from_fn(n, 1, |i, _| (i % 3) as f64);
        let ds = Dataset::from_columns(
            DVector::from_fn(n, |i, _| i as f64 * 0.1),
            x,
            DMatrix::from_element(n, 1, 1.0),
            z2.clone(),
        )
        .unwrap();
        // instrument identical to a control column scaled: extended model is unidentified
        let ds2 = Dataset::from_columns(
            ds.y().clone(),
            ds.x().clone(),
            DMatrix::from_element(n, 1, 1.0),
            DMatrix::from_element(n, 1, 2.0),
        )
        .unwrap();
        assert!(two_step_gmm(&MomentModel::base(&ds).unwrap(), &ds).is_ok());
        let err = two_step_gmm(&MomentModel::extended(&ds2).unwrap(), &ds2).unwrap_err();
        assert!(matches!(err, Error::Identification(_) | Error::Conditioning(_)), "{err}");
    }

    #[test]
    fn criteria_formulas() {
        let (bic, aic, hqic) = msc_values(10.0, 2, 100);
        assert!((bic - 0.7896596280238164).abs() < 1e-12);
        assert_eq!(aic, 6.0);
        assert!((hqic - 3.860737904252238).abs() < 1e-12);
    }

    #[test]
    fn selection_prefers_larger_df_on_ties() {
        let ds = oracle_data();
        let base = two_step_gmm(&MomentModel::base(&ds).unwrap(), &ds).unwrap();
        let mut ext = two_step_gmm(&MomentModel::extended(&ds).unwrap(), &ds).unwrap();
        let r = msc_criteria(&[base.clone(), ext.clone()], 8).unwrap();
        assert_eq!(r.entries.len(), 2);
        // J_b = 7.1 > ln 8, so BIC picks the extended model
        assert_eq!(r.selected_bic, 1);
        ext.j_stat = base.j_stat - 8f64.ln();
        let tied = msc_criteria(&[base, ext], 8).unwrap();
        assert_eq!(tied.selected_bic, 0);
    }
}
