use betel::evidence::Verdict;
use betel::pipeline::{FitOptions, PriorRecipe};
use betel::simulate::{generate_dataset, latent_draws, run_mc, DgpConfig, McGrid, TwoTreatmentDesign};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn cov(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() - 1) as f64
}

fn corr(a: &[f64], b: &[f64]) -> f64 {
    cov(a, b) / (cov(a, a) * cov(b, b)).sqrt()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut r = vec![0.0; v.len()];
    for (k, &i) in idx.iter().enumerate() {
        r[i] = k as f64;
    }
    r
}

/// `(eps, u)` recovered from a baseline dataset with default coefficients.
fn baseline_errors(rho: f64, n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let ds = generate_dataset(&DgpConfig::baseline(n, rho, seed)).unwrap();
    let (y, x, z1, z2) = (ds.y(), ds.x(), ds.z1(), ds.z2());
    let eps = (0..n).map(|i| y[i] - 1.0 - x[(i, 0)] - z1[(i, 1)]).collect();
    let u = (0..n).map(|i| x[(i, 0)] - 1.0 - 0.5 * z1[(i, 1)] - z2[(i, 0)]).collect();
    (eps, u)
}

#[test]
fn independent_errors_when_rho_is_zero() {
    let (eps, u) = baseline_errors(0.0, 100_000, 1);
    assert!(corr(&eps, &u).abs() < 0.01);
}

#[test]
fn error_variance_matches_mixture() {
    let (eps, _) = baseline_errors(0.2, 1_000_000, 2);
    let v = cov(&eps, &eps);
    assert!((v - 1.0).abs() < 0.01, "{v}");
}

#[test]
fn spearman_matches_gaussian_copula() {
    let (eps, u) = baseline_errors(0.6, 100_000, 3);
    let rho_s = corr(&ranks(&eps), &ranks(&u));
    // (6 / pi) asin(0.3)
    assert!((rho_s - 0.5819201041240698).abs() < 0.02, "{rho_s}");
}

#[test]
fn latent_correlation_fidelity() {
    let r = DMatrix::from_row_slice(3, 3, &[1.0, 0.6, 0.0, 0.6, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let e = latent_draws(&r, 100_000, &mut rng).unwrap();
    let cols: Vec<Vec<f64>> = (0..3).map(|j| e.column(j).iter().copied().collect()).collect();
    for a in 0..3 {
        for b in 0..3 {
            assert!((corr(&cols[a], &cols[b]) - r[(a, b)]).abs() < 0.01);
        }
    }
}

#[test]
fn non_psd_correlation_is_config_error() {
    let mut cfg = DgpConfig::two_treatments(100, 0);
    cfg.design = betel::simulate::Design::TwoTreatments(TwoTreatmentDesign {
        v: [0.9, 0.9],
        ..Default::default()
    });
    assert!(generate_dataset(&cfg).unwrap_err().is_config());
}

#[test]
fn two_treatment_covariances() {
    let n = 100_000;
    let ds = generate_dataset(&DgpConfig::two_treatments(n, 5)).unwrap();
    assert_eq!(ds.schema().x, vec!["x1", "x2"]);
    assert_eq!(ds.schema().z2, vec!["z2a", "z2b"]);
    let (y, x, z1) = (ds.y(), ds.x(), ds.z1());
    let eps: Vec<f64> = (0..n)
        .map(|i| y[i] - x[(i, 0)] - 0.8 * x[(i, 1)] - 1.0 - 0.6 * z1[(i, 1)])
        .collect();
    let x1: Vec<f64> = x.column(0).iter().copied().collect();
    let x2: Vec<f64> = x.column(1).iter().copied().collect();
    assert!((cov(&x1, &eps) - 0.5).abs() < 0.05);
    assert!(cov(&x2, &eps).abs() < 0.02);
}

#[test]
fn quadratic_design_columns_and_covariance() {
    let n = 100_000;
    let ds = generate_dataset(&DgpConfig::quadratic(n, 6)).unwrap();
    assert_eq!(ds.schema().x, vec!["x", "xsq"]);
    assert_eq!(ds.schema().z2, vec!["z2", "z2sq"]);
    let (y, x, z1) = (ds.y(), ds.x(), ds.z1());
    let eps: Vec<f64> = (0..n)
        .map(|i| y[i] - 0.5 - x[(i, 0)] - x[(i, 1)] - 0.8 * z1[(i, 1)])
        .collect();
    let xs: Vec<f64> = x.column(0).iter().copied().collect();
    assert!((cov(&xs, &eps) - 0.5).abs() < 0.05);
    for i in 0..100 {
        assert!((x[(i, 1)] - x[(i, 0)].powi(2)).abs() < 1e-12);
    }
}

#[test]
fn single_cell_grid() {
    let grid = McGrid {
        rho: vec![0.5],
        n: vec![120],
        reps: 1,
        base_seed: 3,
        jobs: 1,
    };
    let t = run_mc(
        &grid,
        &DgpConfig::baseline(120, 0.0, 0),
        &PriorRecipe::default(),
        &FitOptions::quick(0),
    )
    .unwrap();
    assert_eq!(t.rows.len(), 1);
    assert!(t.rows[0].extended_wins <= 1);
    assert_eq!(t.replications.len(), 1);
    let r = &t.replications[0];
    assert_eq!(r.extended_wins, r.log_bf_eb.map(|b| betel::evidence::verdict(b) == Verdict::Endogenous));
}

#[test]
fn mc_is_independent_of_thread_count() {
    let mut grid = McGrid {
        rho: vec![0.0, 0.4],
        n: vec![100],
        reps: 3,
        base_seed: 8,
        jobs: 1,
    };
    let opts = FitOptions::quick(0);
    let tpl = DgpConfig::baseline(100, 0.0, 0);
    let a = run_mc(&grid, &tpl, &PriorRecipe::default(), &opts).unwrap();
    grid.jobs = 3;
    let b = run_mc(&grid, &tpl, &PriorRecipe::default(), &opts).unwrap();
    assert_eq!(a.replications, b.replications);
}
