//! `dcb simulate`: reproduce the Monte Carlo tables at desk or full scale.

use std::path::PathBuf;

use clap::Args;
use serde_json::json;

use dcb_core::error::Result;
use dcb_core::estimator::DcbConfig;
use dcb_core::sim::{run_coverage_experiment, run_mse_experiment, CoverageTarget, Method};

use crate::config::load_experiment;
use crate::manifest::RunManifest;
use crate::tables::{fmt_f64, fmt_opt, Table};

#[derive(Args)]
pub struct SimulateArgs {
    /// Experiment description (flat key = value file).
    #[arg(long)]
    pub config: PathBuf,

    /// Scale preset when the config file does not fix one.
    #[arg(long, value_parser = ["desk", "full"])]
    pub profile: Option<String>,

    /// Comma-separated method list override.
    #[arg(long)]
    pub methods: Option<String>,

    /// Replicate count override.
    #[arg(long)]
    pub replicates: Option<usize>,

    #[arg(long, env = "DCB_SEED", default_value_t = 0)]
    pub seed: u64,

    /// Worker threads for the replicate loop.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,

    #[arg(long, default_value = "dcb-out")]
    pub out_dir: PathBuf,
}

pub fn run(args: SimulateArgs) -> Result<()> {
    let mut exp = load_experiment(&args.config, args.profile.as_deref(), args.seed)?;
    if let Some(methods) = &args.methods {
        exp.methods = methods
            .split(',')
            .map(|s| Method::parse(s.trim()))
            .collect::<Result<Vec<_>>>()?;
    }
    if let Some(reps) = args.replicates {
        exp.replicates = reps;
    }

    let mut dcb_cfg = DcbConfig {
        alpha: exp.alpha,
        ..DcbConfig::default()
    };
    dcb_cfg.lasso.cv_seed = exp.sim.seed;

    std::fs::create_dir_all(&args.out_dir)?;
    let mut manifest = RunManifest::new(
        "simulate",
        exp.sim.seed,
        json!({
            "config_file": args.config,
            "sim": exp.sim,
            "replicates": exp.replicates,
            "methods": exp.methods,
            "alpha": exp.alpha,
            "workers": args.workers,
            "coverage_target": exp.coverage_target,
        }),
    );

    eprintln!(
        "simulate: n={} T={} p={} eta={} design={:?} replicates={} methods={:?}",
        exp.sim.n,
        exp.sim.t_periods,
        exp.sim.p,
        exp.sim.eta,
        exp.sim.beta_design,
        exp.replicates,
        exp.methods.iter().map(Method::name).collect::<Vec<_>>()
    );

    let result = run_mse_experiment(
        &exp.sim,
        &exp.methods,
        exp.replicates,
        args.workers,
        &dcb_cfg,
    )?;

    let mut table = Table::new(
        "mse-table/v1",
        "method,design,eta,t_periods,n,p,replicates,failures,mse,bias,coverage_chi,coverage_gauss,mean_ci_width",
    );
    for m in &result.methods {
        table.row(&[
            m.method.name().to_string(),
            format!("{:?}", exp.sim.beta_design).to_lowercase(),
            fmt_f64(exp.sim.eta),
            exp.sim.t_periods.to_string(),
            exp.sim.n.to_string(),
            exp.sim.p.to_string(),
            m.replicates.to_string(),
            m.failures.to_string(),
            fmt_f64(m.mse),
            fmt_f64(m.bias),
            fmt_opt(m.coverage_chi),
            fmt_opt(m.coverage_gauss),
            fmt_opt(m.mean_ci_width),
        ]);
    }
    let mse_path = args.out_dir.join("mse_table.csv");
    std::fs::write(&mse_path, table.finish())?;
    manifest.add_output(&mse_path, "mse-table/v1");

    let records_path = args.out_dir.join("records.json");
    let body = serde_json::to_string_pretty(&json!({
        "schema": "dcb-records/v1",
        "mse": result,
    }))
    .unwrap();
    std::fs::write(&records_path, body)?;
    manifest.add_output(&records_path, "dcb-records/v1");

    if exp.coverage_target != "none" {
        let t = exp.sim.t_periods;
        let target = match exp.coverage_target.as_str() {
            "level" => CoverageTarget::Level(vec![1; t]),
            _ => CoverageTarget::Contrast(vec![1; t], vec![0; t]),
        };
        let cov = run_coverage_experiment(
            &exp.sim,
            &target,
            exp.replicates,
            args.workers,
            &dcb_cfg,
        )?;
        let mut table = Table::new(
            "coverage-table/v1",
            "target,mode,variance,coverage,replicates,failures",
        );
        let target_name = exp.coverage_target.as_str();
        for (mode, variance, value) in [
            ("chi_squared", "heteroskedastic", cov.coverage_chi_het),
            ("chi_squared", "homoskedastic", cov.coverage_chi_hom),
            ("gaussian", "heteroskedastic", cov.coverage_gauss_het),
            ("gaussian", "homoskedastic", cov.coverage_gauss_hom),
        ] {
            table.row(&[
                target_name.to_string(),
                mode.to_string(),
                variance.to_string(),
                fmt_f64(value),
                cov.replicates.to_string(),
                cov.failures.to_string(),
            ]);
        }
        let cov_path = args.out_dir.join("coverage_table.csv");
        std::fs::write(&cov_path, table.finish())?;
        manifest.add_output(&cov_path, "coverage-table/v1");
    }

    manifest.write(&args.out_dir)?;
    eprintln!("wrote {}", mse_path.display());
    Ok(())
}
