//! Linear IV moment functions.
//!
//! For a row `i` with residual `e_i = y_i - beta'x_i - gamma'z1_i` the base
//! moment vector is `e_i * (x_i, z1_i, z2_i)`. Freeing the covariance between
//! the error and a treatment subtracts a free parameter from that treatment's
//! coordinate, which turns the corresponding orthogonality condition off. The
//! `v_mask` selects which treatment coordinates are freed: all-false is the
//! base model, all-true the extended model, anything else one of the
//! `2^d_x - 2` partially restricted models.
//!
//! A treatment can also be kept as a moment column while excluding it from the
//! regression (`coef_mask`), which is how a linear specification is compared
//! against a quadratic one that shares the same moment vector.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Moment specification for one candidate model.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MomentModel {
    pub dx: usize,
    pub dz1: usize,
    pub dz2: usize,
    /// `true` = the covariance of the error with that treatment is free.
    pub v_mask: Vec<bool>,
    /// `true` = the treatment's regression coefficient is estimated;
    /// `false` fixes it at zero (the column only enters the moments).
    pub coef_mask: Vec<bool>,
    pub clustered: bool,
}

impl MomentModel {
    /// Model for `ds` with the given endogeneity mask and all coefficients free.
    pub fn for_dataset(ds: &Dataset, v_mask: Vec<bool>) -> Result<Self> {
        let coef_mask = vec![true; ds.dx()];
        Self::with_coef_mask(ds, v_mask, coef_mask)
    }

    pub fn with_coef_mask(ds: &Dataset, v_mask: Vec<bool>, coef_mask: Vec<bool>) -> Result<Self> {
        let m = MomentModel {
            dx: ds.dx(),
            dz1: ds.dz1(),
            dz2: ds.dz2(),
            v_mask,
            coef_mask,
            clustered: ds.is_clustered(),
        };
        m.check(ds)?;
        Ok(m)
    }

    pub fn base(ds: &Dataset) -> Result<Self> {
        Self::for_dataset(ds, vec![false; ds.dx()])
    }

    pub fn extended(ds: &Dataset) -> Result<Self> {
        Self::for_dataset(ds, vec![true; ds.dx()])
    }

    /// Validates the model against a dataset.
    pub fn check(&self, ds: &Dataset) -> Result<()> {
        if self.dx != ds.dx() || self.dz1 != ds.dz1() || self.dz2 != ds.dz2() {
            return Err(Error::Argument(format!(
                "model dimensions ({}, {}, {}) do not match dataset ({}, {}, {})",
                self.dx,
                self.dz1,
                self.dz2,
                ds.dx(),
                ds.dz1(),
                ds.dz2()
            )));
        }
        if self.v_mask.len() != self.dx || self.coef_mask.len() != self.dx {
            return Err(Error::Argument(format!(
                "masks must have length d_x = {}",
                self.dx
            )));
        }
        if self.clustered != ds.is_clustered() {
            return Err(Error::Argument("model and dataset disagree on clustering".into()));
        }
        if self.n_params() > self.moment_dim() {
            return Err(Error::Identification(format!(
                "{} parameters for {} moments",
                self.n_params(),
                self.moment_dim()
            )));
        }
        Ok(())
    }

    /// Moment dimension `d = d_x + d_z1 + d_z2`.
    pub fn moment_dim(&self) -> usize {
        self.dx + self.dz1 + self.dz2
    }

    /// Number of regression coefficients `p`.
    pub fn n_theta(&self) -> usize {
        self.coef_mask.iter().filter(|&&b| b).count() + self.dz1
    }

    /// Number of free endogeneity parameters `k`.
    pub fn n_free_v(&self) -> usize {
        self.v_mask.iter().filter(|&&b| b).count()
    }

    pub fn n_params(&self) -> usize {
        self.n_theta() + self.n_free_v()
    }

    /// Overidentification degree `d - p - k`.
    pub fn overid_df(&self) -> usize {
        self.moment_dim() - self.n_params()
    }

    pub fn is_base(&self) -> bool {
        self.v_mask.iter().all(|b| !b)
    }

    pub fn is_extended(&self) -> bool {
        self.v_mask.iter().all(|&b| b)
    }

    /// Treatment indices of the free `v` components, ascending.
    pub fn free_v_indices(&self) -> Vec<usize> {
        (0..self.dx).filter(|&j| self.v_mask[j]).collect()
    }

    /// Mask rendered as a bit string, e.g. `"10"`.
    pub fn mask_bits(&self) -> String {
        bits(&self.v_mask)
    }

    /// Short human-readable model label.
    pub fn label(&self) -> String {
        let spec = if self.coef_mask.iter().all(|&b| b) {
            String::new()
        } else {
            format!("[coef {}]", bits(&self.coef_mask))
        };
        let kind = if self.is_base() {
            "base".to_string()
        } else if self.is_extended() {
            "extended".to_string()
        } else {
            let free: Vec<String> = self.free_v_indices().iter().map(|j| format!("x{}", j + 1)).collect();
            format!("endogenous:{}", free.join(","))
        };
        format!("{kind}{spec}")
    }
}

pub(crate) fn bits(mask: &[bool]) -> String {
    mask.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

/// Parses `"10"` or `"1,0"` into a mask.
pub fn parse_mask(s: &str) -> Result<Vec<bool>> {
    s.chars()
        .filter(|c| *c != ',' && !c.is_whitespace())
        .map(|c| match c {
            '1' | 't' | 'T' => Ok(true),
            '0' | 'f' | 'F' => Ok(false),
            other => Err(Error::Config(format!("invalid mask character '{other}' in '{s}'"))),
        })
        .collect()
}

/// All `2^d_x` endogeneity masks, base first, ordered by the binary value of
/// the mask read left to right.
pub fn all_masks(dx: usize) -> Vec<Vec<bool>> {
    (0..1usize << dx)
        .map(|code| (0..dx).map(|j| code >> (dx - 1 - j) & 1 == 1).collect())
        .collect()
}

/// Model parameters `psi = (theta, v_free)`; `theta` holds the free treatment
/// coefficients followed by the control coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub theta: Vec<f64>,
    pub v_free: Vec<f64>,
}

impl ParamVector {
    pub fn new(theta: Vec<f64>, v_free: Vec<f64>) -> Self {
        ParamVector { theta, v_free }
    }

    pub fn from_flat(model: &MomentModel, flat: &[f64]) -> Result<Self> {
        if flat.len() != model.n_params() {
            return Err(Error::Argument(format!(
                "expected {} parameters, got {}",
                model.n_params(),
                flat.len()
            )));
        }
        let p = model.n_theta();
        Ok(ParamVector {
            theta: flat[..p].to_vec(),
            v_free: flat[p..].to_vec(),
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.theta.iter().chain(self.v_free.iter()).copied().collect()
    }

    pub fn check(&self, model: &MomentModel) -> Result<()> {
        if self.theta.len() != model.n_theta() || self.v_free.len() != model.n_free_v() {
            return Err(Error::Argument(format!(
                "parameter lengths ({}, {}) do not match model ({}, {})",
                self.theta.len(),
                self.v_free.len(),
                model.n_theta(),
                model.n_free_v()
            )));
        }
        if !self.theta.iter().chain(self.v_free.iter()).all(|v| v.is_finite()) {
            return Err(Error::Argument("non-finite parameter".into()));
        }
        Ok(())
    }

    /// Full-length `v` with zeros at restricted positions.
    pub fn v_full(&self, model: &MomentModel) -> Vec<f64> {
        let mut v = vec![0.0; model.dx];
        for (slot, j) in model.free_v_indices().into_iter().enumerate() {
            v[j] = self.v_free[slot];
        }
        v
    }
}

/// Cached design matrices for repeated moment evaluation on one dataset.
#[derive(Debug, Clone)]
pub struct MomentEvaluator {
    model: MomentModel,
    y: DVector<f64>,
    /// Moment instruments `(x, z1, z2)`, n x d.
    instruments: DMatrix<f64>,
    /// Regressors `(x_free, z1)`, n x p.
    regressors: DMatrix<f64>,
    blocks: Option<Vec<Vec<usize>>>,
}

impl MomentEvaluator {
    pub fn new(model: &MomentModel, ds: &Dataset) -> Result<Self> {
        model.check(ds)?;
        let n = ds.n();
        let d = model.moment_dim();
        let mut instruments = DMatrix::zeros(n, d);
        instruments.columns_mut(0, model.dx).copy_from(ds.x());
        instruments.columns_mut(model.dx, model.dz1).copy_from(ds.z1());
        instruments.columns_mut(model.dx + model.dz1, model.dz2).copy_from(ds.z2());
        let p = model.n_theta();
        let mut regressors = DMatrix::zeros(n, p);
        let mut c = 0;
        for j in 0..model.dx {
            if model.coef_mask[j] {
                regressors.column_mut(c).copy_from(&ds.x().column(j));
                c += 1;
            }
        }
        regressors.columns_mut(c, model.dz1).copy_from(ds.z1());
        let blocks = ds.is_clustered().then(|| ds.blocks().to_vec());
        Ok(MomentEvaluator {
            model: model.clone(),
            y: ds.y().clone(),
            instruments,
            regressors,
            blocks,
        })
    }

    pub fn model(&self) -> &MomentModel {
        &self.model
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.as_ref().map_or(self.y.len(), Vec::len)
    }

    pub fn instruments(&self) -> &DMatrix<f64> {
        &self.instruments
    }

    pub fn regressors(&self) -> &DMatrix<f64> {
        &self.regressors
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn blocks(&self) -> Option<&[Vec<usize>]> {
        self.blocks.as_deref()
    }

    /// Row residuals `y - W1 theta`.
    pub fn residuals(&self, theta: &[f64]) -> DVector<f64> {
        let theta = DVector::from_column_slice(theta);
        &self.y - &self.regressors * theta
    }

    /// Moment matrix (one row per block) at `params`.
    pub fn matrix(&self, params: &ParamVector) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n_blocks(), self.model.moment_dim());
        self.matrix_into(params, &mut out);
        out
    }

    /// Writes the moment matrix into `out`, which must be `n_blocks x d`.
    pub fn matrix_into(&self, params: &ParamVector, out: &mut DMatrix<f64>) {
        let e = self.residuals(&params.theta);
        let d = self.model.moment_dim();
        match &self.blocks {
            None => {
                for j in 0..d {
                    let src = self.instruments.column(j);
                    let mut dst = out.column_mut(j);
                    for i in 0..e.len() {
                        dst[i] = src[i] * e[i];
                    }
                }
            }
            Some(blocks) => {
                for j in 0..d {
                    let src = self.instruments.column(j);
                    let mut dst = out.column_mut(j);
                    for (b, rows) in blocks.iter().enumerate() {
                        dst[b] = rows.iter().map(|&i| src[i] * e[i]).sum();
                    }
                }
            }
        }
        for (slot, j) in self.model.free_v_indices().into_iter().enumerate() {
            out.column_mut(j).add_scalar_mut(-params.v_free[slot]);
        }
    }

    /// Moment vector of a single block.
    pub fn row(&self, params: &ParamVector, block: usize) -> DVector<f64> {
        let theta = DVector::from_column_slice(&params.theta);
        let rows: Vec<usize> = match &self.blocks {
            None => vec![block],
            Some(b) => b[block].clone(),
        };
        let mut g = DVector::zeros(self.model.moment_dim());
        for i in rows {
            let e = self.y[i] - self.regressors.row(i).dot(&theta.transpose());
            g += self.instruments.row(i).transpose() * e;
        }
        for (slot, j) in self.model.free_v_indices().into_iter().enumerate() {
            g[j] -= params.v_free[slot];
        }
        g
    }

    /// Jacobian of one block's moment vector with respect to `(theta, v_free)`:
    /// `-sum_t w_t w1_t'` for theta and minus a selection matrix for `v`.
    pub fn block_jacobian(&self, block: usize) -> DMatrix<f64> {
        let rows: Vec<usize> = match &self.blocks {
            None => vec![block],
            Some(b) => b[block].clone(),
        };
        let (d, p, k) = (self.model.moment_dim(), self.model.n_theta(), self.model.n_free_v());
        let mut jac = DMatrix::zeros(d, p + k);
        for i in rows {
            let w = self.instruments.row(i).transpose();
            let w1 = self.regressors.row(i);
            let mut th = jac.columns_mut(0, p);
            th -= &w * w1;
        }
        for (slot, j) in self.model.free_v_indices().into_iter().enumerate() {
            jac[(j, p + slot)] = -1.0;
        }
        jac
    }

    /// Block-averaged cross moments `(b, A)` with `mean_g(theta, v) = b - A theta - S v`.
    pub fn linear_form(&self) -> (DVector<f64>, DMatrix<f64>) {
        let nb = self.n_blocks() as f64;
        let b = self.instruments.transpose() * &self.y / nb;
        let a = self.instruments.transpose() * &self.regressors / nb;
        (b, a)
    }
}

/// Residual of row `i`: `y_i - theta'w1_i`.
pub fn residual(model: &MomentModel, ds: &Dataset, params: &ParamVector, i: usize) -> Result<f64> {
    params.check(model)?;
    if i >= ds.n() {
        return Err(Error::Argument(format!("row {i} out of range (n = {})", ds.n())));
    }
    let ev = MomentEvaluator::new(model, ds)?;
    let theta = DVector::from_column_slice(&params.theta);
    Ok(ev.y[i] - ev.regressors.row(i).dot(&theta.transpose()))
}

/// Moment vector of block `i` (a row for flat data, a cluster otherwise).
pub fn moment_row(model: &MomentModel, ds: &Dataset, params: &ParamVector, i: usize) -> Result<DVector<f64>> {
    params.check(model)?;
    let ev = MomentEvaluator::new(model, ds)?;
    if i >= ev.n_blocks() {
        return Err(Error::Argument(format!("block {i} out of range ({})", ev.n_blocks())));
    }
    Ok(ev.row(params, i))
}

/// Moment matrix, one row per block.
pub fn moment_matrix(model: &MomentModel, ds: &Dataset, params: &ParamVector) -> Result<DMatrix<f64>> {
    params.check(model)?;
    Ok(MomentEvaluator::new(model, ds)?.matrix(params))
}
