use dcb_core::estimator::DcbConfig;
use dcb_core::sim::*;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("prop");

    if mode == "prop" {
        for (t, eta) in [(2usize, 0.1), (2, 0.3), (2, 0.5), (3, 0.1), (3, 0.5)] {
            let mut cfg = SimConfig::full(t, eta, BetaDesign::Sparse, 1);
            cfg.p = 100;
            let s = propensity_summary(&cfg, &(0..10).collect::<Vec<u64>>()).unwrap();
            println!(
                "T={t} eta={eta}: min={:.3} q1={:.3} med={:.3} q3={:.3} max={:.3}",
                s.min, s.q1, s.median, s.q3, s.max
            );
        }
    }

    if mode == "mse" {
        let reps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(20);
        let t0 = Instant::now();
        let cfg = SimConfig::full(2, 0.1, BetaDesign::Sparse, 42);
        let methods = [Method::Dcb, Method::AipwOracle, Method::SeqEst, Method::NaiveLasso];
        let res = run_mse_experiment(&cfg, &methods, reps, 1, &DcbConfig::default()).unwrap();
        for m in &res.methods {
            println!(
                "{:<18} mse={:.4} bias={:+.4} cover_chi={:?} reps={} fail={}",
                m.method.name(), m.mse, m.bias, m.coverage_chi, m.replicates, m.failures
            );
        }
        println!("elapsed: {:?} ({:.2} s/rep)", t0.elapsed(), t0.elapsed().as_secs_f64() / reps as f64);
    }

    if mode == "sipw" {
        sipw_mode();
    }
    if mode == "refit" {
        let reps = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
        t3_refit(reps, false);
        t3_refit(reps, true);
    }
    if mode == "t3d" {
        let reps = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
        t3_decompose(reps, 1);
        t3_decompose(reps, 0);
    }
    if mode == "hard" {
        hard_sweep(args.get(2).and_then(|s| s.parse().ok()).unwrap_or(30));
    }
    if mode == "hardr" {
        hard_sweep_inner(args.get(2).and_then(|s| s.parse().ok()).unwrap_or(30), true);
    }
    if mode == "crit8" {
        crit8_mode(args.get(2).and_then(|s| s.parse().ok()).unwrap_or(30));
    }
    if mode == "crit9" {
        crit9_mode(args.get(2).and_then(|s| s.parse().ok()).unwrap_or(30));
    }
    if mode == "crit12" {
        crit12_mode(args.get(2).and_then(|s| s.parse().ok()).unwrap_or(30));
    }
    if mode == "crit4" {
        let seeds: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(30);
        crit4_mode(seeds);
    }
    if mode == "sweep" {
        let reps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(20);
        delta_sweep(reps);
    }
    if mode == "desk" {
        let reps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(20);
        let t0 = Instant::now();
        let cfg = SimConfig::desk(2, 0.1, BetaDesign::Sparse, 42);
        let methods = [Method::Dcb, Method::AipwOracle, Method::SeqEst];
        let res = run_mse_experiment(&cfg, &methods, reps, 1, &DcbConfig::default()).unwrap();
        for m in &res.methods {
            println!(
                "{:<18} mse={:.4} bias={:+.4} reps={} fail={}",
                m.method.name(), m.mse, m.bias, m.replicates, m.failures
            );
        }
        println!("elapsed: {:?} ({:.2} s/rep)", t0.elapsed(), t0.elapsed().as_secs_f64() / reps as f64);
    }
}

#[allow(dead_code)]
fn sipw_mode() {
    use dcb_core::balance::*;
    use dcb_core::panel::{HistoryOpts, TreatmentHistory};
    let cfg = SimConfig::full(2, 0.1, BetaDesign::Sparse, 7);
    let ones = TreatmentHistory::new(vec![1, 1]).unwrap();
    let opts = HistoryOpts::default();
    let mut worst_mults = Vec::new();
    for rep in 0..30u64 {
        let (panel, oracle) = generate_dataset(&cfg, rep).unwrap();
        let probs = oracle.path_prob_treat(&ones);
        let sipw = sipw_sequence(&panel, &ones, &probs).unwrap();
        let widths = BalanceConfig::history_widths(&panel, 2, opts).unwrap();
        let base = BalanceConfig::default_for(panel.n_units(), &widths);
        // Max gap of the SIPW sequence along its own trajectory, per period,
        // expressed as a multiplier of the base delta.
        let n = panel.n_units();
        let mut prev = vec![1.0 / n as f64; n];
        let mut worst = 0.0f64;
        for t in 1..=2 {
            let h = dcb_core::panel::build_history(&panel, t, opts).unwrap();
            let w = h.width();
            let mut maxgap = 0.0f64;
            for j in 0..w {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += (sipw[t - 1][i] - prev[i]) * h.rows[(i, j)];
                }
                maxgap = maxgap.max(acc.abs());
            }
            worst = worst.max(maxgap / base.delta[t - 1]);
            prev = sipw[t - 1].clone();
        }
        worst_mults.push(worst);
    }
    worst_mults.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!("SIPW worst-gap multipliers over 30 seeds:");
    println!("  min={:.3} med={:.3} q90={:.3} max={:.3}",
        worst_mults[0], worst_mults[15], worst_mults[26], worst_mults[29]);
}

#[allow(dead_code)]
fn delta_sweep(reps: usize) {
    use dcb_core::balance::GridConfig;
    for k in [0.05f64, 0.1, 0.2, 0.3, 0.4, 0.6] {
        let t0 = Instant::now();
        let cfg = SimConfig::full(2, 0.1, BetaDesign::Sparse, 42);
        let mut dcb_cfg = DcbConfig::default();
        // Pin the multiplier: degenerate one-value grid.
        dcb_cfg.grid = GridConfig { lo: k, hi: k + 1e-9, grid_len: 1, n_grids: 2 };
        let methods = [Method::Dcb, Method::AipwOracle];
        let res = run_mse_experiment(&cfg, &methods, reps, 1, &dcb_cfg).unwrap();
        println!(
            "k={k:.2}: dcb mse={:.4} bias={:+.4} fail={} | aipw* mse={:.4} | {:?}",
            res.methods[0].mse, res.methods[0].bias, res.methods[0].failures,
            res.methods[1].mse, t0.elapsed()
        );
    }
}

#[allow(dead_code)]
fn crit4_mode(n_seeds: usize) {
    use dcb_core::balance::*;
    use dcb_core::estimator::dcb_estimate;
    use dcb_core::panel::{HistoryOpts, TreatmentHistory};
    let cfg = SimConfig::full(2, 0.1, BetaDesign::Sparse, 7);
    let ones = TreatmentHistory::new(vec![1, 1]).unwrap();
    let opts = HistoryOpts::default();
    let mut feas_count = 0usize;
    let mut dom_fail = 0usize;
    let t0 = Instant::now();
    for rep in 0..n_seeds as u64 {
        let (panel, oracle) = generate_dataset(&cfg, rep).unwrap();
        let mut dcb_cfg = DcbConfig::default();
        dcb_cfg.lasso.cv_seed = rep;
        let out = dcb_estimate(&panel, &ones, &dcb_cfg).unwrap();
        let probs = oracle.path_prob_treat(&ones);
        let sipw = sipw_sequence(&panel, &ones, &probs).unwrap();
        let n = panel.n_units();
        let mut prevs = vec![vec![1.0 / n as f64; n]];
        prevs.push(out.weights.gamma[0].clone());
        let ok = check_weights_against_program(
            &panel, &ones, &sipw, &prevs, &out.weights.bounds,
            &out.config_used.cap, opts,
        ).unwrap();
        let all_ok = ok.iter().all(|&b| b);
        if all_ok {
            feas_count += 1;
            for t in 1..=2usize {
                let n_dcb = n as f64 * out.weights.gamma[t-1].iter().map(|g| g*g).sum::<f64>();
                let n_sipw = n as f64 * sipw[t-1].iter().map(|g| g*g).sum::<f64>();
                if n_dcb > n_sipw + 1e-8 {
                    dom_fail += 1;
                    println!("  seed {rep} t={t}: dcb norm {n_dcb:.4} > sipw {n_sipw:.4}");
                }
            }
        } else {
            println!("  seed {rep}: sipw infeasible in program ({:?})", ok);
        }
    }
    println!("in-program SIPW feasible: {}/{}  domination failures: {}  ({:?})",
        feas_count, n_seeds, dom_fail, t0.elapsed());
}

#[allow(dead_code)]
fn crit8_mode(reps: usize) {
    // Poor overlap, three periods, reduced profile.
    let t0 = Instant::now();
    let cfg = SimConfig::desk(3, 0.5, BetaDesign::Sparse, 11);
    let methods = [Method::Dcb, Method::AipwOracle, Method::IpwPenLogistic];
    let res = run_mse_experiment(&cfg, &methods, reps, 1, &DcbConfig::default()).unwrap();
    for m in &res.methods {
        println!(
            "{:<18} mse={:.4} bias={:+.4} reps={} fail={}",
            m.method.name(), m.mse, m.bias, m.replicates, m.failures
        );
    }
    println!("crit8 elapsed: {:?}", t0.elapsed());
}

#[allow(dead_code)]
fn crit9_mode(reps: usize) {
    let t0 = Instant::now();
    let cfg = SimConfig::full(2, 0.5, BetaDesign::Sparse, 13);
    let target = CoverageTarget::Contrast(vec![1, 1], vec![0, 0]);
    let res = run_coverage_experiment(&cfg, &target, reps, 1, &DcbConfig::default()).unwrap();
    println!(
        "coverage chi(het)={:.3} chi(hom)={:.3} gauss(het)={:.3} gauss(hom)={:.3} fail={}",
        res.coverage_chi_het, res.coverage_chi_hom, res.coverage_gauss_het,
        res.coverage_gauss_hom, res.failures
    );
    println!("crit9 elapsed: {:?}", t0.elapsed());
}

#[allow(dead_code)]
fn crit12_mode(reps: usize) {
    let t0 = Instant::now();
    let mut cfg = SimConfig::desk(2, 0.3, BetaDesign::Sparse, 17);
    cfg.misspecified = true;
    let methods = [Method::Dcb, Method::AipwOracle];
    let res = run_mse_experiment(&cfg, &methods, reps, 1, &DcbConfig::default()).unwrap();
    for m in &res.methods {
        println!(
            "{:<18} mse={:.4} bias={:+.4} reps={} fail={}",
            m.method.name(), m.mse, m.bias, m.replicates, m.failures
        );
    }
    println!("crit12 elapsed: {:?}", t0.elapsed());
}

#[allow(dead_code)]
fn hard_sweep(reps: usize) {
    hard_sweep_inner(reps, false);
}

#[allow(dead_code)]
fn hard_sweep_inner(reps: usize, relaxed: bool) {
    use dcb_core::balance::GridConfig;
    println!("== T=3 eta=0.5 desk (relaxed={relaxed}) ==");
    for k in [0.02f64, 0.05, 0.1, 0.2, 0.4] {
        let cfg = SimConfig::desk(3, 0.5, BetaDesign::Sparse, 11);
        let mut dcb_cfg = DcbConfig::default();
        dcb_cfg.lasso.relaxed = relaxed;
        dcb_cfg.grid = GridConfig { lo: k, hi: 2.0, grid_len: 4, n_grids: 4 };
        let methods = [Method::Dcb, Method::AipwOracle];
        let res = run_mse_experiment(&cfg, &methods, reps, 1, &dcb_cfg).unwrap();
        println!(
            "lo={k:.2}: dcb mse={:.4} bias={:+.4} fail={} | aipw* mse={:.4} bias={:+.4}",
            res.methods[0].mse, res.methods[0].bias, res.methods[0].failures,
            res.methods[1].mse, res.methods[1].bias
        );
    }
    println!("== misspecified T=2 eta=0.3 desk (relaxed={relaxed}) ==");
    for k in [0.02f64, 0.05, 0.1, 0.2] {
        let mut cfg = SimConfig::desk(2, 0.3, BetaDesign::Sparse, 17);
        cfg.misspecified = true;
        let mut dcb_cfg = DcbConfig::default();
        dcb_cfg.lasso.relaxed = relaxed;
        dcb_cfg.grid = GridConfig { lo: k, hi: 2.0, grid_len: 4, n_grids: 4 };
        let methods = [Method::Dcb, Method::AipwOracle];
        let res = run_mse_experiment(&cfg, &methods, reps, 1, &dcb_cfg).unwrap();
        println!(
            "lo={k:.2}: dcb mse={:.4} bias={:+.4} fail={} | aipw* mse={:.4} bias={:+.4}",
            res.methods[0].mse, res.methods[0].bias, res.methods[0].failures,
            res.methods[1].mse, res.methods[1].bias
        );
    }
}

/// True per-period projected means for Y_3(d,d,d) on the linear T=3 DGP,
/// with tau-term tau*(sum of d over active periods):
///   m_3 = (X1+X2+X3)b + 0.5 Y1 + Y2 + 3 d
///   m_2 = 2 X1 b + 2.5 X2 b + 1.5 Y1 + 5 d
///   m_1 = 4.75 X1 b + 6.5 d
#[allow(dead_code)]
fn true_fitted_t3(panel: &dcb_core::PanelDataset, beta: &[f64], d: f64) -> Vec<Vec<f64>> {
    let n = panel.n_units();
    let xb = |i: usize, t: usize| -> f64 {
        (0..panel.p_cov()).map(|j| panel.x(i, t, j) * beta[j]).sum()
    };
    let mut out = vec![vec![0.0; n]; 3];
    for i in 0..n {
        out[2][i] = xb(i, 1) + xb(i, 2) + xb(i, 3) + 0.5 * panel.y(i, 1) + panel.y(i, 2) + 3.0 * d;
        out[1][i] = 2.0 * xb(i, 1) + 2.5 * xb(i, 2) + 1.5 * panel.y(i, 1) + 5.0 * d;
        out[0][i] = 4.75 * xb(i, 1) + 6.5 * d;
    }
    out
}

#[allow(dead_code)]
fn t3_decompose(reps: usize, bit: u8) {
    use dcb_core::balance::sipw_sequence;
    use dcb_core::panel::TreatmentHistory;
    use dcb_core::path::{fit_coefficient_path, PathMode};
    let cfg = SimConfig::desk(3, 0.5, BetaDesign::Sparse, 11);
    let ones = TreatmentHistory::new(vec![bit; 3]).unwrap();
    let mut agg = [[0.0f64; 4]; 2]; // [dcb, sipw] x [i1, i2, i3, total]
    for rep in 0..reps as u64 {
        let (panel, oracle) = generate_dataset(&cfg, rep).unwrap();
        let beta = cfg.beta();
        let m_true = true_fitted_t3(&panel, &beta, f64::from(bit));
        let mut dcb_cfg = DcbConfig::default();
        dcb_cfg.grid.lo = 0.02;
        dcb_cfg.lasso.cv_seed = rep;
        let path = fit_coefficient_path(&panel, &ones, PathMode::Linear, &dcb_cfg.lasso, dcb_cfg.history).unwrap();
        let out = dcb_core::estimator::dcb_estimate_with_path(&panel, &ones, path.clone(), &dcb_cfg).unwrap();
        let probs = oracle.path_prob_treat(&ones);
        let sipw = sipw_sequence(&panel, &ones, &probs).unwrap();
        let n = panel.n_units();
        let nf = n as f64;
        for (k, gamma) in [&out.weights.gamma, &sipw].into_iter().enumerate() {
            let mut i1 = 0.0;
            for t in 0..3 {
                let prev: Vec<f64> = if t == 0 { vec![1.0 / nf; n] } else { gamma[t - 1].clone() };
                i1 += (0..n)
                    .map(|i| (gamma[t][i] - prev[i]) * (m_true[t][i] - path.fitted[t][i]))
                    .sum::<f64>();
            }
            let i2: f64 = (0..n).map(|i| gamma[2][i] * (panel.y(i, 3) - m_true[2][i])).sum();
            let mut i3 = 0.0;
            for t in 1..3 {
                i3 += (0..n)
                    .map(|i| gamma[t - 1][i] * (m_true[t][i] - m_true[t - 1][i]))
                    .sum::<f64>();
            }
            agg[k][0] += i1 / reps as f64;
            agg[k][1] += i2 / reps as f64;
            agg[k][2] += i3 / reps as f64;
            agg[k][3] += (i1 + i2 + i3) / reps as f64;
        }
    }
    println!("arm ({bit},{bit},{bit}) error decomposition, mean over {reps} reps:");
    println!("  DCB : I1={:+.4} I2={:+.4} I3={:+.4} total={:+.4}", agg[0][0], agg[0][1], agg[0][2], agg[0][3]);
    println!("  SIPW: I1={:+.4} I2={:+.4} I3={:+.4} total={:+.4}", agg[1][0], agg[1][1], agg[1][2], agg[1][3]);
}

#[allow(dead_code)]
fn t3_refit(reps: usize, relaxed: bool) {
    use dcb_core::panel::TreatmentHistory;
    use dcb_core::path::{fit_coefficient_path, PathMode};
    let cfg = SimConfig::desk(3, 0.5, BetaDesign::Sparse, 11);
    let ones = TreatmentHistory::new(vec![1, 1, 1]).unwrap();
    let mut l1_err = 0.0;
    for rep in 0..reps as u64 {
        let (panel, _) = generate_dataset(&cfg, rep).unwrap();
        let beta = cfg.beta();
        let mut lcfg = dcb_core::path::LassoConfig { relaxed, cv_seed: rep, ..Default::default() };
        lcfg.cv_seed = rep;
        let path = fit_coefficient_path(&panel, &ones, PathMode::Linear, &lcfg, Default::default()).unwrap();
        // Stage-3 truth on [D1,D2|X1..X3|Y1,Y2|1|D3]: tau, tau, beta x3, 0.5, 1, 0, tau
        let b3 = &path.betas[2];
        let p = panel.p_cov();
        let mut err = (b3[0] - 1.0).abs() + (b3[1] - 1.0).abs();
        for s in 0..3 {
            for j in 0..p {
                err += (b3[2 + s * p + j] - beta[j]).abs();
            }
        }
        err += (b3[2 + 3 * p] - 0.5).abs() + (b3[2 + 3 * p + 1] - 1.0).abs();
        err += b3[2 + 3 * p + 2].abs() + (b3[2 + 3 * p + 3] - 1.0).abs();
        l1_err += err / reps as f64;
    }
    println!("relaxed={relaxed}: mean stage-3 L1 coefficient error = {l1_err:.3}");
}
