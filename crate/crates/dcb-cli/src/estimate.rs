//! `dcb estimate`: balancing estimates and contrasts on user panels.

use std::path::Path;

use clap::Args;
use serde_json::json;

use dcb_core::balance::{imbalance_report, GridConfig};
use dcb_core::error::Result;
use dcb_core::estimator::{ate_estimate, dcb_estimate, DcbConfig, QuantileMode};
use dcb_core::panel::{load_panel, TreatmentHistory};
use dcb_core::path::PathMode;

use crate::config::parse_schema;
use crate::manifest::RunManifest;
use crate::tables::{fmt_f64, Table};
use crate::CommonArgs;

#[derive(Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Comparison history for an effect contrast, e.g. "0,0".
    #[arg(long)]
    pub d_alt: Option<String>,

    /// Confidence level complement.
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,

    /// Interval calibration: chi (chi-squared) or gauss.
    #[arg(long, default_value = "chi", value_parser = ["chi", "gauss"])]
    pub quantile: String,

    /// Coefficient model: linear in treatments (pooled) or full
    /// interactions (per-stratum).
    #[arg(long, default_value = "linear", value_parser = ["linear", "full"])]
    pub model: String,

    /// Skip constraint tuning and use the base slack directly.
    #[arg(long)]
    pub no_tune: bool,
}

pub fn build_dcb_config(common: &CommonArgs, alpha: f64, quantile: &str, model: &str, tune: bool) -> DcbConfig {
    let mut cfg = DcbConfig {
        alpha,
        mode: if quantile == "gauss" {
            QuantileMode::Gaussian
        } else {
            QuantileMode::ChiSquared
        },
        path_mode: if model == "full" {
            PathMode::FullInteractions
        } else {
            PathMode::Linear
        },
        tune,
        ..DcbConfig::default()
    };
    cfg.lasso.cv_seed = common.seed;
    let g = GridConfig::default();
    cfg.grid = GridConfig {
        lo: common.grid_lo.unwrap_or(g.lo),
        hi: common.grid_hi.unwrap_or(g.hi),
        grid_len: common.grid_len.unwrap_or(g.grid_len),
        n_grids: common.grid_count.unwrap_or(g.n_grids),
    };
    cfg
}

pub fn apply_base_delta(cfg: &mut DcbConfig, data: &dcb_core::PanelDataset, horizon: usize, base_delta: Option<f64>) -> Result<()> {
    if let Some(delta) = base_delta {
        let widths = dcb_core::balance::BalanceConfig::history_widths(data, horizon, cfg.history)?;
        let mut bal = dcb_core::balance::BalanceConfig::default_for(data.n_units(), &widths);
        bal.delta = vec![delta; horizon];
        cfg.balance = Some(bal);
    }
    Ok(())
}

pub fn write_imbalance_csv(
    path: &Path,
    weights: &dcb_core::balance::BalanceWeights,
    data: &dcb_core::PanelDataset,
    history: dcb_core::HistoryOpts,
) -> Result<()> {
    let rows = imbalance_report(weights, data, history)?;
    let mut table = Table::new("imbalance/v1", "period,column,gap,bound");
    for r in &rows {
        table.row(&[
            r.period.to_string(),
            r.column.clone(),
            fmt_f64(r.gap),
            fmt_f64(r.bound),
        ]);
    }
    std::fs::write(path, table.finish())?;
    Ok(())
}

pub fn run(args: EstimateArgs) -> Result<()> {
    let schema = parse_schema(args.common.schema.as_deref())?;
    let data = load_panel(&args.common.panel, &schema)?;
    let d = TreatmentHistory::parse(&args.common.d)?;
    let mut cfg = build_dcb_config(
        &args.common,
        args.alpha,
        &args.quantile,
        &args.model,
        !args.no_tune,
    );
    apply_base_delta(&mut cfg, &data, d.len(), args.common.base_delta)?;

    std::fs::create_dir_all(&args.common.out_dir)?;
    let mut manifest = RunManifest::new(
        "estimate",
        args.common.seed,
        json!({
            "panel": args.common.panel,
            "d": args.common.d,
            "d_alt": args.d_alt,
            "alpha": args.alpha,
            "quantile": args.quantile,
            "model": args.model,
            "tune": !args.no_tune,
            "grid": {"lo": cfg.grid.lo, "hi": cfg.grid.hi, "len": cfg.grid.grid_len, "count": cfg.grid.n_grids},
            "base_delta": args.common.base_delta,
        }),
    );

    // On infeasibility, leave least-infeasible diagnostics behind before
    // surfacing the error (exit code 2).
    let write_diag_on_error = |err: dcb_core::DcbError| -> dcb_core::DcbError {
        if matches!(
            err,
            dcb_core::DcbError::Infeasible { .. } | dcb_core::DcbError::NoFeasiblePoint { .. }
        ) {
            let widths = dcb_core::balance::BalanceConfig::history_widths(&data, d.len(), cfg.history);
            if let Ok(widths) = widths {
                let mut bal = cfg
                    .balance
                    .clone()
                    .unwrap_or_else(|| dcb_core::balance::BalanceConfig::default_for(data.n_units(), &widths));
                bal.k1 = vec![cfg.grid.hi; d.len()];
                if let Ok(w) =
                    dcb_core::balance::solve_weight_sequence_lenient(&data, &d, &bal, cfg.history)
                {
                    let _ = write_imbalance_csv(
                        &args.common.out_dir.join("imbalance.csv"),
                        &w,
                        &data,
                        cfg.history,
                    );
                }
            }
        }
        err
    };

    let (report_json, weights) = match &args.d_alt {
        None => {
            let out = dcb_estimate(&data, &d, &cfg).map_err(write_diag_on_error)?;
            (
                serde_json::to_value(&out.report).unwrap(),
                out.weights,
            )
        }
        Some(alt) => {
            let d_alt = TreatmentHistory::parse(alt)?;
            let out = ate_estimate(&data, &d, &d_alt, &cfg).map_err(write_diag_on_error)?;
            for w in &out.report.warnings {
                eprintln!("warning: {w}");
            }
            (
                json!({
                    "contrast": out.report,
                    "level_d": out.level_d.report,
                    "level_d_alt": out.level_d_alt.report,
                }),
                out.level_d.weights,
            )
        }
    };

    let est_path = args.common.out_dir.join("estimate.json");
    let body = serde_json::to_string_pretty(&json!({
        "schema": "dcb-estimate/v1",
        "report": report_json,
    }))
    .unwrap();
    std::fs::write(&est_path, body)?;
    manifest.add_output(&est_path, "dcb-estimate/v1");

    let imb_path = args.common.out_dir.join("imbalance.csv");
    write_imbalance_csv(&imb_path, &weights, &data, cfg.history)?;
    manifest.add_output(&imb_path, "imbalance/v1");

    manifest.write(&args.common.out_dir)?;
    println!("wrote {}", est_path.display());
    Ok(())
}
