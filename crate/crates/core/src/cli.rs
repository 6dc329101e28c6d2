//! Command implementations behind the `betel` binary.
//!
//! Every command reads a JSON [`RunConfig`], applies the global overrides and
//! writes its outputs to the output directory. Exit codes: 0 on success, 1 on
//! numerical or pipeline failure, 2 on configuration errors.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::{DataSource, ModelSpec, RunConfig};
use crate::data::save_csv;
use crate::error::{Error, Result};
use crate::evidence::{select_models, test_endogeneity, ModelSummary};
use crate::freq::{msc_criteria, two_step_gmm, GmmFit};
use crate::moments::MomentModel;
use crate::pipeline::fit_model;
use crate::posterior::CoordSummary;
use crate::simulate::{generate_dataset, run_mc, run_msc_mc, write_msc_mc_csv, DgpConfig};

#[derive(Debug, Parser)]
#[command(name = "betel", version, about = "Bayesian ETEL endogeneity testing for linear IV regressions")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the sampler, simulation and Monte Carlo seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides `output_dir`; default `.`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for `mc` and `gmm-msc` grids.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Short chains: 200 burn-in, 2000 kept draws.
    #[arg(long, global = true)]
    pub quick: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Simulate a dataset and write `data.csv`.
    Simulate,
    /// Fit one model; writes `fit_summary.json` and `chain.csv`.
    Fit {
        /// Endogeneity mask such as `1` or `10`; defaults to the first
        /// configured model, then to the extended model.
        #[arg(long)]
        mask: Option<String>,
        /// Free (`1`) or zero-fixed (`0`) treatment coefficients.
        #[arg(long)]
        coef_mask: Option<String>,
    },
    /// Base versus extended model; writes `test.json`.
    TestEndogeneity,
    /// Rank candidate models; writes `comparison.json` and `comparison.csv`.
    Select,
    /// Monte Carlo selection frequencies; writes `mc.csv`.
    Mc,
    /// GMM moment selection criteria; writes `msc.json` and `msc.csv`, or
    /// `msc_mc.csv` when a grid is configured.
    GmmMsc,
}

/// Process exit code for a result.
pub fn exit_code(r: &Result<()>) -> i32 {
    match r {
        Ok(()) => 0,
        Err(e) if e.is_config() => 2,
        Err(_) => 1,
    }
}

/// Parses, dispatches and reports; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let r = run(&cli);
    if let Err(e) = &r {
        eprintln!("error: {e}");
    }
    exit_code(&r)
}

/// Loads the configuration and applies the global flags.
pub fn resolve_config(cli: &Cli) -> Result<(RunConfig, PathBuf)> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if cli.quick {
        cfg = cfg.quick();
    }
    if let (Some(j), Some(g)) = (cli.jobs, cfg.grid.as_mut()) {
        g.jobs = j;
    }
    cfg.validate()?;
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out)
        .map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", out.display())))?;
    Ok((cfg, out))
}

pub fn run(cli: &Cli) -> Result<()> {
    let (cfg, out) = resolve_config(cli)?;
    match &cli.command {
        Command::Simulate => cmd_simulate(&cfg, &out),
        Command::Fit { mask, coef_mask } => {
            let spec = match mask {
                Some(m) => Some(ModelSpec::Full {
                    mask: m.clone(),
                    coef_mask: coef_mask.clone(),
                }),
                None => cfg.models.first().cloned(),
            };
            cmd_fit(&cfg, spec.as_ref(), &out)
        }
        Command::TestEndogeneity => cmd_test(&cfg, &out),
        Command::Select => cmd_select(&cfg, &out),
        Command::Mc => cmd_mc(&cfg, &out),
        Command::GmmMsc => cmd_gmm_msc(&cfg, &out),
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}

pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let DataSource::Simulate(dgp) = &cfg.data else {
        return Err(Error::Config("simulate needs a `simulate` data source".into()));
    };
    let ds = generate_dataset(dgp)?;
    save_csv(&ds, out.join("data.csv"))?;
    println!("wrote {} rows to {}", ds.n(), out.join("data.csv").display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct GmmSummary {
    estimate: Vec<f64>,
    std_errors: Vec<f64>,
    j_stat: f64,
    df: usize,
    j_pvalue: Option<f64>,
}

impl From<&GmmFit> for GmmSummary {
    fn from(g: &GmmFit) -> Self {
        GmmSummary {
            estimate: g.estimate.to_flat(),
            std_errors: g.std_errors.clone(),
            j_stat: g.j_stat,
            df: g.df,
            j_pvalue: g.j_pvalue(),
        }
    }
}

#[derive(Debug, Serialize)]
struct FitReport {
    model: ModelSummary,
    seed: u64,
    n_estimation: usize,
    n_training: usize,
    mode: Vec<f64>,
    mode_log_post: f64,
    coordinates: Vec<CoordSummary>,
    log_ml: f64,
    mc_se: f64,
    theta_star: Vec<f64>,
    feasibility_mass: Option<f64>,
    prior: crate::priors::PriorSpec,
    gmm: Option<GmmSummary>,
}

pub fn cmd_fit(cfg: &RunConfig, spec: Option<&ModelSpec>, out: &Path) -> Result<()> {
    let ds = cfg.load_dataset()?;
    let model = match spec {
        Some(s) => s.build(&ds)?,
        None => MomentModel::extended(&ds)?,
    };
    let label = model.label();
    let fit = fit_model(&ds, &model, &cfg.prior, &cfg.fit_options()).map_err(|e| e.in_model(&label))?;
    let report = FitReport {
        model: ModelSummary::from_fit(&fit),
        seed: fit.chain.seed,
        n_estimation: fit.n_estimation,
        n_training: fit.n_training,
        mode: fit.chain.mode.clone(),
        mode_log_post: fit.chain.mode_log_post,
        coordinates: fit.chain.summary(),
        log_ml: fit.evidence.log_ml,
        mc_se: fit.evidence.mc_se,
        theta_star: fit.evidence.theta_star.clone(),
        feasibility_mass: fit.evidence.feasibility.as_ref().map(|f| f.p_hat),
        prior: fit.prior.clone(),
        gmm: fit.gmm.as_ref().map(GmmSummary::from),
    };
    write_json(&report, &out.join("fit_summary.json"))?;
    fit.chain.write_csv(out.join("chain.csv"))?;
    println!(
        "{label}: log_ml = {:.4} (mc_se {:.4}), acceptance {:.3}",
        fit.evidence.log_ml, fit.evidence.mc_se, fit.chain.accept_rate
    );
    Ok(())
}

pub fn cmd_test(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = cfg.load_dataset()?;
    let t = test_endogeneity(&ds, &cfg.prior, &cfg.fit_options())?;
    write_json(&t, &out.join("test.json"))?;
    println!("log BF_eb = {:.4}: {:?}", t.log_bf_eb, t.verdict);
    Ok(())
}

pub fn cmd_select(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = cfg.load_dataset()?;
    let models = cfg.candidate_models(&ds)?;
    let report = select_models(&ds, &models, &cfg.prior, &cfg.fit_options())?;
    report.write_json(out.join("comparison.json"))?;
    report.write_csv(out.join("comparison.csv"))?;
    match report.winner_label() {
        Some(w) => println!("selected {w}"),
        None => println!("no model could be fitted"),
    }
    Ok(())
}

pub fn cmd_mc(cfg: &RunConfig, out: &Path) -> Result<()> {
    let grid = cfg
        .grid
        .as_ref()
        .ok_or_else(|| Error::Config("mc needs a `grid` section".into()))?;
    let template = match &cfg.data {
        DataSource::Simulate(d) => d.clone(),
        DataSource::Csv { .. } => DgpConfig::baseline(grid.n[0], 0.0, grid.base_seed),
    };
    let started = Instant::now();
    let table = run_mc(grid, &template, &cfg.prior, &cfg.fit_options())?;
    table.write_csv(out.join("mc.csv"))?;
    write_json(&table.replications, &out.join("mc_replications.json"))?;
    let mut log = std::fs::File::create(out.join("mc_timing.log"))?;
    for r in &table.rows {
        writeln!(log, "rho={} n={} wall_time_s={:.3}", r.rho, r.n, r.wall_time_s)?;
    }
    writeln!(log, "total_wall_time_s={:.3}", started.elapsed().as_secs_f64())?;
    for r in &table.rows {
        println!(
            "rho={:>5} n={:>5}: extended wins {}/{} ({} failed), mean log BF {:.3}",
            r.rho, r.n, r.extended_wins, r.reps, r.failures, r.mean_log_bf
        );
    }
    Ok(())
}

pub fn cmd_gmm_msc(cfg: &RunConfig, out: &Path) -> Result<()> {
    if let Some(grid) = &cfg.grid {
        let template = match &cfg.data {
            DataSource::Simulate(d) => d.clone(),
            DataSource::Csv { .. } => DgpConfig::baseline(grid.n[0], 0.0, grid.base_seed),
        };
        let rows = run_msc_mc(grid, &template)?;
        write_msc_mc_csv(&rows, out.join("msc_mc.csv"))?;
        for r in &rows {
            println!(
                "rho={:>5} n={:>5}: GMM-BIC picks extended {}/{}",
                r.rho, r.n, r.bic_extended, r.reps
            );
        }
        return Ok(());
    }
    let ds = cfg.load_dataset()?;
    let fits = cfg
        .candidate_models(&ds)?
        .iter()
        .map(|m| two_step_gmm(m, &ds).map_err(|e| e.in_model(&m.label())))
        .collect::<Result<Vec<_>>>()?;
    let report = msc_criteria(&fits, ds.n_blocks())?;
    report.write_json(out.join("msc.json"))?;
    report.write_csv(out.join("msc.csv"))?;
    for c in ["bic", "aic", "hqic"] {
        println!("GMM-{}: {}", c.to_uppercase(), report.selected_label(c).unwrap_or("-"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Ok(())), 0);
        assert_eq!(exit_code(&Err(Error::Config("x".into()))), 2);
        assert_eq!(exit_code(&Err(Error::Numeric("x".into()))), 1);
        let nested = Error::Config("x".into()).in_model("base");
        assert_eq!(exit_code(&Err(nested)), 2);
    }

    #[test]
    fn global_flags_parse_after_subcommand() {
        let cli = Cli::try_parse_from(["betel", "fit", "--mask", "1", "--quick", "--seed", "4"]).unwrap();
        assert!(cli.quick);
        assert_eq!(cli.seed, Some(4));
        assert!(matches!(cli.command, Command::Fit { mask: Some(ref m), .. } if m == "1"));
    }

    #[test]
    fn missing_config_flag_is_config_error() {
        let cli = Cli::try_parse_from(["betel", "simulate"]).unwrap();
        assert!(run(&cli).unwrap_err().is_config());
        assert_eq!(main_with_args(["betel", "no-such-command"]), 2);
    }
}
