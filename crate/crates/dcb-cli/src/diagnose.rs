//! `dcb diagnose`: imbalance tables and weight-concentration summaries,
//! no estimation.

use clap::Args;
use serde_json::json;

use dcb_core::balance::{solve_weight_sequence_lenient, tune_constraints, BalanceConfig};
use dcb_core::error::Result;
use dcb_core::panel::{load_panel, match_mask, TreatmentHistory};
use dcb_core::path::fit_coefficient_path;

use crate::config::parse_schema;
use crate::estimate::{apply_base_delta, build_dcb_config, write_imbalance_csv};
use crate::manifest::RunManifest;
use crate::tables::{fmt_f64, Table};
use crate::CommonArgs;

#[derive(Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub common: CommonArgs,
}

pub fn run(args: DiagnoseArgs) -> Result<()> {
    let schema = parse_schema(args.common.schema.as_deref())?;
    let data = load_panel(&args.common.panel, &schema)?;
    let d = TreatmentHistory::parse(&args.common.d)?;
    let mut cfg = build_dcb_config(&args.common, 0.05, "chi", "linear", true);
    apply_base_delta(&mut cfg, &data, d.len(), args.common.base_delta)?;

    std::fs::create_dir_all(&args.common.out_dir)?;
    let mut manifest = RunManifest::new(
        "diagnose",
        args.common.seed,
        json!({
            "panel": args.common.panel,
            "d": args.common.d,
            "base_delta": args.common.base_delta,
        }),
    );

    let widths = BalanceConfig::history_widths(&data, d.len(), cfg.history)?;
    let base = cfg
        .balance
        .clone()
        .unwrap_or_else(|| BalanceConfig::default_for(data.n_units(), &widths));

    let coef = fit_coefficient_path(&data, &d, cfg.path_mode, &cfg.lasso, cfg.history)?;
    let weights = match tune_constraints(&data, &d, &base, &coef, &cfg.grid, cfg.history) {
        Ok(tuned) => tuned.weights,
        Err(err @ dcb_core::DcbError::NoFeasiblePoint { .. }) => {
            // Emit least-infeasible diagnostics, then surface exit code 2.
            let mut loose = base.clone();
            loose.k1 = vec![cfg.grid.hi; d.len()];
            if let Ok(w) = solve_weight_sequence_lenient(&data, &d, &loose, cfg.history) {
                let path = args.common.out_dir.join("imbalance.csv");
                write_imbalance_csv(&path, &w, &data, cfg.history)?;
            }
            return Err(err);
        }
        Err(e) => return Err(e),
    };

    let imb_path = args.common.out_dir.join("imbalance.csv");
    write_imbalance_csv(&imb_path, &weights, &data, cfg.history)?;
    manifest.add_output(&imb_path, "imbalance/v1");

    // Uniform-on-stratum baseline rows for comparison: the gaps of the raw
    // stratum means against the balancing targets.
    let mut summary = Table::new(
        "weight-summary/v1",
        "period,stratum_size,max_weight,effective_sample_size,feasible,max_gap,uniform_max_gap",
    );
    let n = data.n_units();
    let mut prev = vec![1.0 / n as f64; n];
    for t in 1..=d.len() {
        let h = dcb_core::build_history(&data, t, cfg.history)?;
        let mask = match_mask(&data, &d.prefix(t));
        let count = mask.iter().filter(|&&m| m).count();
        let uniform: Vec<f64> = mask
            .iter()
            .map(|&m| if m { 1.0 / count as f64 } else { 0.0 })
            .collect();
        let mut uniform_gap = 0.0f64;
        for j in 0..h.width() {
            let mut acc = 0.0;
            for i in 0..n {
                acc += (uniform[i] - prev[i]) * h.rows[(i, j)];
            }
            uniform_gap = uniform_gap.max(acc.abs());
        }
        summary.row(&[
            t.to_string(),
            count.to_string(),
            fmt_f64(weights.max_weight(t)),
            fmt_f64(weights.effective_sample_size(t)),
            weights.feasible[t - 1].to_string(),
            fmt_f64(weights.achieved_imbalance[t - 1]),
            fmt_f64(uniform_gap),
        ]);
        prev = weights.gamma[t - 1].clone();
    }
    let sum_path = args.common.out_dir.join("weight_summary.csv");
    std::fs::write(&sum_path, summary.finish())?;
    manifest.add_output(&sum_path, "weight-summary/v1");

    manifest.write(&args.common.out_dir)?;
    println!("wrote {}", sum_path.display());
    Ok(())
}
