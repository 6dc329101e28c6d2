//! Coordinatewise independent normal and Student-t priors.

use rand::Rng;
use rand_distr::{Distribution, Normal, StudentT};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::freq::two_step_gmm;
use crate::moments::{MomentModel, ParamVector};

const LN_2PI: f64 = 1.8378770664093453;

/// Prior on one parameter coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum CoordPrior {
    Normal { loc: f64, scale: f64 },
    StudentT { loc: f64, scale: f64, df: f64 },
}

impl CoordPrior {
    pub fn loc(&self) -> f64 {
        match *self {
            CoordPrior::Normal { loc, .. } | CoordPrior::StudentT { loc, .. } => loc,
        }
    }

    pub fn scale(&self) -> f64 {
        match *self {
            CoordPrior::Normal { scale, .. } | CoordPrior::StudentT { scale, .. } => scale,
        }
    }

    fn validate(&self) -> Result<()> {
        let (loc, scale, df) = match *self {
            CoordPrior::Normal { loc, scale } => (loc, scale, 1.0),
            CoordPrior::StudentT { loc, scale, df } => (loc, scale, df),
        };
        if !loc.is_finite() || !(scale > 0.0) || !scale.is_finite() || !(df > 0.0) {
            return Err(Error::Argument(format!("invalid coordinate prior {self:?}")));
        }
        Ok(())
    }

    /// Log density including normalizing constants.
    pub fn log_density(&self, x: f64) -> f64 {
        match *self {
            CoordPrior::Normal { loc, scale } => {
                let z = (x - loc) / scale;
                -0.5 * LN_2PI - scale.ln() - 0.5 * z * z
            }
            CoordPrior::StudentT { loc, scale, df } => {
                let z = (x - loc) / scale;
                ln_gamma(0.5 * (df + 1.0)) - ln_gamma(0.5 * df) - 0.5 * (df * std::f64::consts::PI).ln() - scale.ln()
                    - 0.5 * (df + 1.0) * (z * z / df).ln_1p()
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            CoordPrior::Normal { loc, scale } => loc + scale * Normal::new(0.0, 1.0).expect("unit normal").sample(rng),
            CoordPrior::StudentT { loc, scale, df } => {
                loc + scale * StudentT::new(df).expect("validated df").sample(rng)
            }
        }
    }
}

/// Independent prior over the flattened parameter vector `(theta, v_free)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub coords: Vec<CoordPrior>,
}

impl PriorSpec {
    pub fn new(coords: Vec<CoordPrior>) -> Result<Self> {
        for c in &coords {
            c.validate()?;
        }
        Ok(PriorSpec { coords })
    }

    pub fn normal(loc: &[f64], scale: &[f64]) -> Result<Self> {
        if loc.len() != scale.len() {
            return Err(Error::Argument("location and scale lengths differ".into()));
        }
        Self::new(
            loc.iter()
                .zip(scale)
                .map(|(&loc, &scale)| CoordPrior::Normal { loc, scale })
                .collect(),
        )
    }

    pub fn student_t(loc: &[f64], scale: &[f64], df: f64) -> Result<Self> {
        if loc.len() != scale.len() {
            return Err(Error::Argument("location and scale lengths differ".into()));
        }
        Self::new(
            loc.iter()
                .zip(scale)
                .map(|(&loc, &scale)| CoordPrior::StudentT { loc, scale, df })
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn locations(&self) -> Vec<f64> {
        self.coords.iter().map(CoordPrior::loc).collect()
    }

    pub fn check_model(&self, model: &MomentModel) -> Result<()> {
        if self.dim() != model.n_params() {
            return Err(Error::Argument(format!(
                "prior has {} coordinates but {} has {} parameters",
                self.dim(),
                model.label(),
                model.n_params()
            )));
        }
        Ok(())
    }

    /// Log prior density of a flattened parameter vector.
    pub fn log_density(&self, flat: &[f64]) -> Result<f64> {
        if flat.len() != self.dim() {
            return Err(Error::Argument(format!(
                "prior has {} coordinates, parameter has {}",
                self.dim(),
                flat.len()
            )));
        }
        Ok(self.coords.iter().zip(flat).map(|(c, &x)| c.log_density(x)).sum())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.coords.iter().map(|c| c.sample(rng)).collect()
    }
}

/// Log prior density at `params`.
pub fn log_prior(spec: &PriorSpec, params: &ParamVector) -> Result<f64> {
    spec.log_density(&params.to_flat())
}

/// Student-t prior centered at the training-sample two-step GMM estimate with
/// scale `inflate` times the GMM standard error, coordinate by coordinate.
pub fn build_training_prior(train: &Dataset, model: &MomentModel, inflate: f64, df: f64) -> Result<PriorSpec> {
    if !(inflate > 0.0) || !(df > 0.0) {
        return Err(Error::Argument(format!("invalid training prior knobs inflate={inflate}, df={df}")));
    }
    let fit = two_step_gmm(model, train)?;
    let loc = fit.estimate.to_flat();
    let scale: Vec<f64> = loc
        .iter()
        .zip(&fit.std_errors)
        .map(|(l, se)| (inflate * se).max(1e-10 * (1.0 + l.abs())))
        .collect();
    PriorSpec::student_t(&loc, &scale, df)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    #[test]
    fn normal_ordinate() {
        let p = PriorSpec::normal(&[0.0], &[1.0]).unwrap();
        assert!((p.log_density(&[0.0]).unwrap() - -0.9189385332046727).abs() < 1e-15);
    }

    #[test]
    fn student_t_limit() {
        let t = CoordPrior::StudentT { loc: 0.0, scale: 1.0, df: 1e6 };
        assert!((t.log_density(0.0) - -0.9189385332046727).abs() < 1e-3);
    }

    #[test]
    fn student_t_center_value() {
        let t = CoordPrior::StudentT { loc: 0.3, scale: 1.0, df: 2.5 };
        assert!((t.log_density(0.3) - -1.01663959346045).abs() < 1e-12);
        let wide = CoordPrior::StudentT { loc: 0.3, scale: 4.0, df: 2.5 };
        assert!((wide.log_density(0.3) - (-1.01663959346045 - 4f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn coordinates_add() {
        let p = PriorSpec::new(vec![
            CoordPrior::Normal { loc: 1.0, scale: 2.0 },
            CoordPrior::StudentT { loc: -1.0, scale: 0.5, df: 3.0 },
        ])
        .unwrap();
        let a = PriorSpec::new(vec![p.coords[0]]).unwrap().log_density(&[0.2]).unwrap();
        let b = PriorSpec::new(vec![p.coords[1]]).unwrap().log_density(&[0.7]).unwrap();
        assert!((p.log_density(&[0.2, 0.7]).unwrap() - a - b).abs() < 1e-15);
        assert!(p.log_density(&[0.2]).is_err());
    }

    #[test]
    fn invalid_scale_rejected() {
        assert!(PriorSpec::normal(&[0.0], &[0.0]).is_err());
        assert!(PriorSpec::student_t(&[0.0], &[1.0], -1.0).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let p = PriorSpec::student_t(&[1.0, 2.0], &[0.5, 0.25], 2.5).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("student_t"));
        let back: PriorSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn training_prior_on_noiseless_data() {
        let n = 60;
        let f = |i: usize, s: usize| ((i * 37 + s * 11) % 29) as f64 / 9.0 - 1.5;
        let z1 = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { f(i, 1) });
        let z2 = DMatrix::from_fn(n, 1, |i, _| f(i, 2));
        let x = DMatrix::from_fn(n, 1, |i, _| z2[(i, 0)] + 0.2 * f(i, 5));
        let y = DVector::from_fn(n, |i, _| x[(i, 0)] + 1.0 + z1[(i, 1)]);
        let ds = Dataset::from_columns(y, x, z1, z2).unwrap();
        let m = MomentModel::base(&ds).unwrap();
        let p = build_training_prior(&ds, &m, 2.0, 2.5).unwrap();
        for (c, t) in p.coords.iter().zip([1.0, 1.0, 1.0]) {
            assert!((c.loc() - t).abs() < 1e-10);
            assert!(c.scale() > 0.0);
        }
    }

    proptest! {
        #[test]
        fn unimodal(loc in -5.0f64..5.0, scale in 0.1f64..5.0, df in 0.5f64..30.0, a in 0.0f64..3.0, b in 0.0f64..3.0) {
            let t = CoordPrior::StudentT { loc, scale, df };
            let n = CoordPrior::Normal { loc, scale };
            let (near, far) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(t.log_density(loc + near) >= t.log_density(loc + far));
            prop_assert!(n.log_density(loc - near) >= n.log_density(loc - far));
        }
    }
}
