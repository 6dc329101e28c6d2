use betel::data::split_train;
use betel::evidence::{test_endogeneity, Verdict};
use betel::freq::two_step_gmm;
use betel::moments::{MomentModel, ParamVector};
use betel::pipeline::{FitOptions, PriorRecipe};
use betel::posterior::{find_mode, log_posterior, EtelTarget, ModeConfig, Target};
use betel::priors::{build_training_prior, log_prior, PriorSpec};
use betel::simulate::{generate_dataset, DgpConfig};
use betel::{SplitSpec, TiltConfig};
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn posterior_is_prior_plus_etel() {
    let ds = generate_dataset(&DgpConfig::baseline(200, 0.3, 11)).unwrap();
    let model = MomentModel::extended(&ds).unwrap();
    let gmm = two_step_gmm(&model, &ds).unwrap();
    let flat = gmm.estimate.to_flat();
    let prior = PriorSpec::normal(&vec![0.0; flat.len()], &vec![3.0; flat.len()]).unwrap();
    let target = EtelTarget::new(&model, &ds, prior.clone(), TiltConfig::default()).unwrap();
    let lp = log_posterior(&model, &ds, &prior, &gmm.estimate).unwrap();
    let parts = log_prior(&prior, &gmm.estimate).unwrap() + target.log_likelihood(&flat).unwrap();
    assert!((lp - parts).abs() < 1e-9 * (1.0 + lp.abs()));

    let shifted = PriorSpec::normal(&vec![0.5; flat.len()], &vec![3.0; flat.len()]).unwrap();
    let lp2 = log_posterior(&model, &ds, &shifted, &gmm.estimate).unwrap();
    let diff = log_prior(&shifted, &gmm.estimate).unwrap() - log_prior(&prior, &gmm.estimate).unwrap();
    assert!((lp2 - lp - diff).abs() < 1e-9);
}

#[test]
fn all_positive_moments_are_infeasible() {
    let ds = generate_dataset(&DgpConfig::baseline(200, 0.0, 12)).unwrap();
    let model = MomentModel::base(&ds).unwrap();
    let prior = PriorSpec::normal(&[0.0; 3], &[10.0; 3]).unwrap();
    // intercept far below every outcome makes each residual positive
    let ymin = ds.y().min();
    let p = ParamVector::new(vec![0.0, ymin - 1e6, 0.0], vec![]);
    assert_eq!(model.n_params(), 3);
    assert_eq!(log_posterior(&model, &ds, &prior, &p).unwrap(), f64::NEG_INFINITY);
}

#[test]
fn restarts_agree_on_the_mode() {
    let ds = generate_dataset(&DgpConfig::baseline(250, 0.4, 13)).unwrap();
    let model = MomentModel::extended(&ds).unwrap();
    let gmm = two_step_gmm(&model, &ds).unwrap();
    let start = gmm.estimate.to_flat();
    let prior = build_training_prior(&ds, &model, 2.0, 2.5).unwrap();
    let target = EtelTarget::new(&model, &ds, prior, TiltConfig::default()).unwrap();
    let one = find_mode(&target, &start, &ModeConfig::default()).unwrap();
    let many = find_mode(
        &target,
        &start,
        &ModeConfig {
            restarts: 4,
            ..Default::default()
        },
    )
    .unwrap();
    for (a, b) in one.mode.iter().zip(&many.mode) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn training_prior_scale_is_inflated_se() {
    let ds = generate_dataset(&DgpConfig::baseline(400, 0.2, 14)).unwrap();
    let model = MomentModel::extended(&ds).unwrap();
    let gmm = two_step_gmm(&model, &ds).unwrap();
    let prior = build_training_prior(&ds, &model, 2.0, 2.5).unwrap();
    for (c, se) in prior.coords.iter().zip(&gmm.std_errors) {
        assert!((c.scale() - 2.0 * se).abs() < 1e-12 * (1.0 + se));
    }
    assert_eq!(prior.locations(), gmm.estimate.to_flat());
}

#[test]
fn disjoint_training_sets_agree() {
    let ds = generate_dataset(&DgpConfig::baseline(2000, 0.3, 15)).unwrap();
    let model = MomentModel::extended(&ds).unwrap();
    let a = ds.select_rows(&(0..1000).collect::<Vec<_>>()).unwrap();
    let b = ds.select_rows(&(1000..2000).collect::<Vec<_>>()).unwrap();
    let pa = build_training_prior(&a, &model, 1.0, 2.5).unwrap();
    let pb = build_training_prior(&b, &model, 1.0, 2.5).unwrap();
    for (ca, cb) in pa.coords.iter().zip(&pb.coords) {
        let bound = 3.0 * (ca.scale().powi(2) + cb.scale().powi(2)).sqrt();
        assert!((ca.loc() - cb.loc()).abs() < bound);
    }
}

#[test]
fn split_is_reproducible_and_partitions() {
    let ds = generate_dataset(&DgpConfig::baseline(300, 0.0, 16)).unwrap();
    let spec = SplitSpec {
        train_fraction: 0.2,
        seed: 4,
    };
    let (t1, e1) = split_train(&ds, &spec).unwrap();
    let (t2, _) = split_train(&ds, &spec).unwrap();
    assert_eq!(t1.n() + e1.n(), 300);
    assert_eq!(t1.y(), t2.y());
}

#[test]
fn verdicts_follow_the_design() {
    let opts = FitOptions::quick(21);
    let recipe = PriorRecipe::default();
    let endo = test_endogeneity(&generate_dataset(&DgpConfig::baseline(2000, 0.5, 21)).unwrap(), &recipe, &opts).unwrap();
    assert_eq!(endo.verdict, Verdict::Endogenous);
    let exo = test_endogeneity(&generate_dataset(&DgpConfig::baseline(2000, 0.0, 22)).unwrap(), &recipe, &opts).unwrap();
    assert_eq!(exo.verdict, Verdict::Exogenous);
    for t in [&endo, &exo] {
        assert!((t.log_bf_eb - (t.log_ml_e - t.log_ml_b)).abs() < 1e-12);
    }
}

#[test]
fn j_test_rejects_the_base_model_under_endogeneity() {
    let crit = ChiSquared::new(1.0).unwrap().inverse_cdf(0.99);
    let rejections = (0..20)
        .filter(|&s| {
            let ds = generate_dataset(&DgpConfig::baseline(2000, 0.6, 100 + s)).unwrap();
            let fit = two_step_gmm(&MomentModel::base(&ds).unwrap(), &ds).unwrap();
            assert_eq!(fit.df, 1);
            fit.j_stat > crit
        })
        .count();
    assert!(rejections >= 18, "{rejections}/20");
}
