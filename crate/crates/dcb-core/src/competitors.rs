//! Reference estimators sharing the coefficient machinery: stabilized IPW,
//! augmented IPW with known or estimated propensities, a pooled "naive"
//! Lasso, and sequential estimation by forward simulation.

use ndarray::Array2;

use crate::balance::sipw_sequence;
use crate::error::{DcbError, Result};
use crate::estimator::{assemble_estimate, EstimateReport, QuantileMode, VarianceKind,
    WeightDiagnostics};
use crate::lasso::{cross_validate_lambda, lambda_grid, lasso_fit};
use crate::logistic::{cross_validate_logistic, logistic_fit, PROB_CLIP};
use crate::panel::{build_history, match_mask, HistoryOpts, PanelDataset, TreatmentHistory};
use crate::path::{CoefficientPath, LassoConfig};

/// Per-period conditional treatment probabilities for every unit.
#[derive(Debug, Clone)]
pub struct PropensityModel {
    /// prob_treat[t-1][i] = P(D_t = 1 | information before D_t), clipped.
    pub prob_treat: Vec<Vec<f64>>,
    pub mode: PropensityMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropensityMode {
    Known,
    Logistic,
    PenalizedLogistic,
}

impl PropensityModel {
    pub fn known(prob_treat: Vec<Vec<f64>>) -> Self {
        let clipped = prob_treat
            .into_iter()
            .map(|v| {
                v.into_iter()
                    .map(|p| p.clamp(PROB_CLIP, 1.0 - PROB_CLIP))
                    .collect()
            })
            .collect();
        Self {
            prob_treat: clipped,
            mode: PropensityMode::Known,
        }
    }
}

/// Fits per-period propensities by (penalized) logistic regression of D_t
/// on H_t over the pooled sample. The penalized variant leaves the
/// intercept and lagged-treatment columns unpenalized and selects the
/// penalty by cross-validated deviance.
pub fn estimate_propensity_logistic(
    data: &PanelDataset,
    penalized: bool,
    opts: HistoryOpts,
    seed: u64,
) -> Result<PropensityModel> {
    let n = data.n_units();
    let t_max = data.n_periods();
    let mut prob_treat = Vec::with_capacity(t_max);
    for t in 1..=t_max {
        let h = build_history(data, t, opts)?;
        let w = h.width();
        let d_t: Vec<u8> = (0..n).map(|i| data.d(i, t)).collect();
        let mut mask = vec![penalized; w];
        for j in h.treat_cols.clone() {
            mask[j] = false;
        }
        if let Some(ic) = h.intercept_col {
            mask[ic] = false;
        }
        let lambda = if penalized {
            let grid = vec![0.3, 0.2, 0.12, 0.08, 0.05, 0.03, 0.02, 0.01];
            cross_validate_logistic(h.rows.view(), &d_t, &mask, 4, &grid, 1e-6, 60, seed)?
        } else {
            0.0
        };
        let fit = logistic_fit(h.rows.view(), &d_t, lambda, &mask, 1e-6, 100)?;
        let probs: Vec<f64> = (0..n)
            .map(|i| {
                let row: Vec<f64> = h.rows.row(i).iter().cloned().collect();
                fit.predict_prob(&row)
            })
            .collect();
        prob_treat.push(probs);
    }
    Ok(PropensityModel {
        prob_treat,
        mode: if penalized {
            PropensityMode::PenalizedLogistic
        } else {
            PropensityMode::Logistic
        },
    })
}

/// Stabilized inverse-probability-weighting estimate of μ(d): the product
/// weights of the propensity model, normalized to sum to one at the end
/// line. The reported variance is the plug-in nΣw²(Y−μ̂)² diagnostic.
pub fn ipw_estimate(
    data: &PanelDataset,
    d: &TreatmentHistory,
    propensity: &PropensityModel,
    alpha: f64,
) -> Result<EstimateReport> {
    let weights = sipw_sequence(data, d, &propensity.prob_treat)?;
    let n = data.n_units();
    let w_t = weights.last().unwrap();
    let y = data.endline_outcomes();
    let mu_hat: f64 = (0..n).map(|i| w_t[i] * y[i]).sum();
    let v_hat: f64 = n as f64
        * (0..n)
            .map(|i| w_t[i] * w_t[i] * (y[i] - mu_hat).powi(2))
            .sum::<f64>();
    let ci = crate::estimator::confidence_interval(
        mu_hat,
        v_hat,
        n,
        1,
        alpha,
        QuantileMode::Gaussian,
    );
    let stratum_sizes: Vec<usize> = (1..=d.len())
        .map(|t| match_mask(data, &d.prefix(t)).iter().filter(|&&m| m).count())
        .collect();
    Ok(EstimateReport {
        mu_hat,
        v_hat,
        ci,
        alpha,
        mode: QuantileMode::Gaussian,
        variance: VarianceKind::Heteroskedastic,
        df: 1,
        n_units: n,
        t_periods: d.len(),
        v_hat_homoskedastic: v_hat,
        ci_chi_squared: ci,
        ci_gaussian: ci,
        residual_summary: Vec::new(),
        diagnostics: WeightDiagnostics {
            max_weight: weights
                .iter()
                .map(|g| g.iter().cloned().fold(0.0, f64::max))
                .collect(),
            effective_sample_size: weights
                .iter()
                .map(|g| {
                    let ss: f64 = g.iter().map(|v| v * v).sum();
                    if ss > 0.0 {
                        1.0 / ss
                    } else {
                        0.0
                    }
                })
                .collect(),
            stratum_sizes,
        },
        warnings: vec!["ipw variance is a plug-in weight-concentration diagnostic".into()],
    })
}

/// Augmented IPW: the balancing weights in the shared assembly are replaced
/// by stabilized inverse-probability weights at each period; the variance
/// uses the same formula as the balancing estimator.
pub fn aipw_estimate(
    data: &PanelDataset,
    d: &TreatmentHistory,
    propensity: &PropensityModel,
    coef_path: &CoefficientPath,
    alpha: f64,
    mode: QuantileMode,
    variance: VarianceKind,
) -> Result<EstimateReport> {
    let weights = sipw_sequence(data, d, &propensity.prob_treat)?;
    let stratum_sizes: Vec<usize> = (1..=d.len())
        .map(|t| match_mask(data, &d.prefix(t)).iter().filter(|&&m| m).count())
        .collect();
    Ok(assemble_estimate(
        data,
        d,
        &weights,
        coef_path,
        stratum_sizes,
        alpha,
        mode,
        variance,
        Vec::new(),
    ))
}

/// Pooled-design column layout for the naive Lasso: all covariates by
/// period, all treatments, then an intercept.
fn pooled_design(data: &PanelDataset) -> (Array2<f64>, Vec<bool>, usize) {
    let n = data.n_units();
    let t_max = data.n_periods();
    let p = data.p_cov();
    let width = t_max * p + t_max + 1;
    let mut x = Array2::<f64>::zeros((n, width));
    for i in 0..n {
        let mut c = 0;
        for t in 1..=t_max {
            for j in 0..p {
                x[(i, c)] = data.x(i, t, j);
                c += 1;
            }
        }
        for t in 1..=t_max {
            x[(i, c)] = f64::from(data.d(i, t));
            c += 1;
        }
        x[(i, c)] = 1.0;
    }
    let mut mask = vec![true; width];
    for c in t_max * p..width {
        mask[c] = false; // treatments and intercept unpenalized
    }
    (x, mask, t_max * p)
}

/// Naive Lasso level estimate: one pooled regression of Y_T on all
/// covariates and treatment assignments, evaluated at the covariate means
/// under assignment `d`. Contrasts of two levels reduce to the treatment
/// coefficients times the assignment difference.
pub fn naive_lasso_estimate(
    data: &PanelDataset,
    d: &TreatmentHistory,
    cfg: &LassoConfig,
) -> Result<f64> {
    let (x, mask, d_offset) = pooled_design(data);
    let y = data.endline_outcomes();
    let lambda = match cfg.lambda_override {
        Some(l) => l,
        None => {
            let grid = lambda_grid(x.view(), &y, &mask, cfg.grid_len, cfg.grid_ratio)?;
            cross_validate_lambda(
                x.view(),
                &y,
                &mask,
                cfg.folds,
                &grid,
                cfg.tol,
                cfg.max_iter,
                cfg.cv_seed,
            )?
        }
    };
    let fit = lasso_fit(x.view(), &y, lambda, &mask, cfg.tol, cfg.max_iter)?;

    let n = data.n_units();
    let nf = n as f64;
    let width = x.ncols();
    let mut at = vec![0.0; width];
    for c in 0..d_offset {
        at[c] = (0..n).map(|i| x[(i, c)]).sum::<f64>() / nf;
    }
    for (t, &bit) in d.bits().iter().enumerate() {
        at[d_offset + t] = f64::from(bit);
    }
    at[width - 1] = 1.0;
    Ok(fit.predict_row(&at))
}

/// Contrast of two naive-Lasso levels from a single pooled fit: the
/// covariate terms cancel, leaving the treatment coefficients times the
/// assignment difference.
pub fn naive_lasso_contrast(
    data: &PanelDataset,
    d: &TreatmentHistory,
    d_alt: &TreatmentHistory,
    cfg: &LassoConfig,
) -> Result<f64> {
    let (x, mask, d_offset) = pooled_design(data);
    let y = data.endline_outcomes();
    let lambda = match cfg.lambda_override {
        Some(l) => l,
        None => {
            let grid = lambda_grid(x.view(), &y, &mask, cfg.grid_len, cfg.grid_ratio)?;
            cross_validate_lambda(
                x.view(),
                &y,
                &mask,
                cfg.folds,
                &grid,
                cfg.tol,
                cfg.max_iter,
                cfg.cv_seed,
            )?
        }
    };
    let fit = lasso_fit(x.view(), &y, lambda, &mask, cfg.tol, cfg.max_iter)?;
    Ok(d
        .bits()
        .iter()
        .zip(d_alt.bits())
        .enumerate()
        .map(|(t, (&a, &b))| fit.coef[d_offset + t] * (f64::from(a) - f64::from(b)))
        .sum())
}

/// Sequential estimation: per-period Lasso models for the outcome and for
/// each time-varying covariate coordinate on the matching strata, then a
/// forward simulation of predicted covariates/outcomes from baseline.
/// Returns the mean predicted end-line outcome.
pub fn sequential_estimate(
    data: &PanelDataset,
    d: &TreatmentHistory,
    cfg: &LassoConfig,
) -> Result<f64> {
    let n = data.n_units();
    let t_max = d.len();
    let p = data.p_cov();
    let nf = n as f64;

    // Design at period t: realized/simulated [X_1.., X_t, Y_1.., Y_{t-1}, 1].
    let design_width = |t: usize| t * p + (t - 1) + 1;
    let stratum = |t: usize| -> Result<Vec<usize>> {
        let mask = match_mask(data, &d.prefix(t));
        let idx: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
        if idx.is_empty() {
            return Err(DcbError::EmptyStratum {
                prefix: d.prefix(t).to_string(),
            });
        }
        Ok(idx)
    };

    let observed_row = |i: usize, t: usize| -> Vec<f64> {
        let mut row = Vec::with_capacity(design_width(t));
        for s in 1..=t {
            for j in 0..p {
                row.push(data.x(i, s, j));
            }
        }
        for s in 1..t {
            row.push(data.y(i, s));
        }
        row.push(1.0);
        row
    };

    let fit_on = |idx: &[usize],
                  t: usize,
                  response: &dyn Fn(usize) -> f64,
                  lambda: Option<f64>,
                  seed: u64|
     -> Result<(Vec<f64>, f64)> {
        let w = design_width(t);
        let mut x = Array2::<f64>::zeros((idx.len(), w));
        let mut y = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            let row = observed_row(i, t);
            for (c, v) in row.iter().enumerate() {
                x[(r, c)] = *v;
            }
            y.push(response(i));
        }
        let mut mask = vec![true; w];
        mask[w - 1] = false;
        let lam = match lambda.or(cfg.lambda_override) {
            Some(l) => l,
            None => {
                let grid = lambda_grid(x.view(), &y, &mask, cfg.grid_len, cfg.grid_ratio)?;
                cross_validate_lambda(
                    x.view(),
                    &y,
                    &mask,
                    cfg.folds.min(idx.len().max(2)),
                    &grid,
                    cfg.tol,
                    cfg.max_iter,
                    seed,
                )?
            }
        };
        let fit = lasso_fit(x.view(), &y, lam, &mask, cfg.tol, cfg.max_iter)?;
        Ok((fit.coef, lam))
    };

    // Outcome models per period and covariate-transition models per
    // coordinate. Covariate models within a period share the penalty
    // cross-validated on the first coordinate.
    let mut y_models: Vec<Vec<f64>> = Vec::with_capacity(t_max);
    let mut x_models: Vec<Vec<Vec<f64>>> = Vec::new(); // [s-2][j] for s = 2..=t_max
    for t in 1..=t_max {
        let idx = stratum(t)?;
        let seed = cfg.cv_seed.wrapping_mul(7919).wrapping_add(t as u64);
        let (coef, _) = fit_on(&idx, t, &|i| data.y(i, t), None, seed)?;
        y_models.push(coef);
    }
    for s in 2..=t_max {
        let idx = stratum(s - 1)?;
        let seed = cfg.cv_seed.wrapping_mul(6007).wrapping_add(s as u64);
        let mut per_coord = Vec::with_capacity(p);
        let mut shared_lambda = None;
        for j in 0..p {
            let (coef, lam) = fit_on(&idx, s - 1, &|i| data.x(i, s, j), shared_lambda, seed)?;
            if shared_lambda.is_none() {
                shared_lambda = Some(lam);
            }
            per_coord.push(coef);
        }
        x_models.push(per_coord);
    }

    // Forward simulation from observed baselines for every unit.
    let mut x_hat: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(t_max); n]; // [i][s-1][j]
    let mut y_hat: Vec<Vec<f64>> = vec![Vec::with_capacity(t_max); n];
    for i in 0..n {
        x_hat[i].push((0..p).map(|j| data.x(i, 1, j)).collect());
    }
    let sim_row = |x_hat: &[Vec<f64>], y_hat: &[f64], t: usize| -> Vec<f64> {
        let mut row = Vec::with_capacity(design_width(t));
        for s in 0..t {
            row.extend_from_slice(&x_hat[s]);
        }
        for s in 0..t - 1 {
            row.push(y_hat[s]);
        }
        row.push(1.0);
        row
    };
    for t in 1..=t_max {
        for i in 0..n {
            let row = sim_row(&x_hat[i], &y_hat[i], t);
            let pred: f64 = row.iter().zip(&y_models[t - 1]).map(|(a, b)| a * b).sum();
            y_hat[i].push(pred);
        }
        if t < t_max {
            for i in 0..n {
                let row = sim_row(&x_hat[i], &y_hat[i], t);
                let next: Vec<f64> = (0..p)
                    .map(|j| {
                        row.iter()
                            .zip(&x_models[t - 1][j])
                            .map(|(a, b)| a * b)
                            .sum()
                    })
                    .collect();
                x_hat[i].push(next);
            }
        }
    }

    Ok((0..n).map(|i| y_hat[i][t_max - 1]).sum::<f64>() / nf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path::PathMode;
    use approx::assert_abs_diff_eq;
    use ndarray::{Array2 as A2, Array3};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn normal(rng: &mut ChaCha8Rng) -> f64 {
        rng.sample(rand_distr::StandardNormal)
    }

    /// Deterministic linear two-period panel: Y_2 = X1 + X2 + Y1 + d1 + d2,
    /// Y_1 = X1 + d1, X_2 = 0.5 X_1 (noiseless).
    fn linear_panel(n: usize, seed: u64) -> PanelDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = 1;
        let mut x = Array3::<f64>::zeros((n, 2, p));
        let mut d = A2::<u8>::zeros((n, 2));
        let mut y = A2::<f64>::zeros((n, 2));
        for i in 0..n {
            let x1 = normal(&mut rng);
            x[(i, 0, 0)] = x1;
            x[(i, 1, 0)] = 0.5 * x1;
            d[(i, 0)] = u8::from(rng.gen_bool(0.5));
            d[(i, 1)] = u8::from(rng.gen_bool(0.5));
            y[(i, 0)] = x1 + f64::from(d[(i, 0)]);
            y[(i, 1)] = x1 + 0.5 * x1 + y[(i, 0)] + f64::from(d[(i, 0)]) + f64::from(d[(i, 1)]);
        }
        let ids = (0..n).map(|i| format!("u{i}")).collect();
        PanelDataset::new(ids, x, d, y).unwrap()
    }

    #[test]
    fn ipw_constant_propensity_is_stratum_mean() {
        let panel = linear_panel(200, 1);
        let d = TreatmentHistory::new(vec![1, 1]).unwrap();
        let pm = PropensityModel::known(vec![vec![0.5; 200], vec![0.5; 200]]);
        let rep = ipw_estimate(&panel, &d, &pm, 0.05).unwrap();
        let mask = match_mask(&panel, &d);
        let vals: Vec<f64> = (0..200).filter(|&i| mask[i]).map(|i| panel.y(i, 2)).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert_abs_diff_eq!(rep.mu_hat, mean, epsilon = 1e-10);
    }

    #[test]
    fn ipw_weight_concentration_diagnosed() {
        let n = 50;
        let panel = linear_panel(n, 3);
        let d = TreatmentHistory::new(vec![1, 1]).unwrap();
        let mask = match_mask(&panel, &d);
        let star = mask.iter().position(|&m| m).unwrap();
        let mut p1 = vec![0.9; n];
        p1[star] = 1e-6; // one on-path unit dominates after inverse weighting
        let pm = PropensityModel::known(vec![p1, vec![0.5; n]]);
        let rep = ipw_estimate(&panel, &d, &pm, 0.05).unwrap();
        assert!(rep.diagnostics.max_weight[1] > 0.9);
        assert!(rep.diagnostics.effective_sample_size[1] < 2.0);
    }

    #[test]
    fn aipw_shares_the_assembly_with_dcb() {
        // Feeding identical weights through the shared assembly produces
        // identical reports, bit for bit.
        let panel = linear_panel(80, 5);
        let d = TreatmentHistory::new(vec![1, 1]).unwrap();
        let cfg = LassoConfig {
            lambda_override: Some(1e-8),
            ..Default::default()
        };
        let path = crate::path::fit_coefficient_path(
            &panel,
            &d,
            PathMode::Linear,
            &cfg,
            HistoryOpts::default(),
        )
        .unwrap();
        let pm = PropensityModel::known(vec![vec![0.5; 80], vec![0.5; 80]]);
        let weights = sipw_sequence(&panel, &d, &pm.prob_treat).unwrap();
        let via_aipw = aipw_estimate(
            &panel,
            &d,
            &pm,
            &path,
            0.05,
            QuantileMode::ChiSquared,
            VarianceKind::Heteroskedastic,
        )
        .unwrap();
        let stratum_sizes: Vec<usize> = (1..=2)
            .map(|t| match_mask(&panel, &d.prefix(t)).iter().filter(|&&m| m).count())
            .collect();
        let direct = assemble_estimate(
            &panel,
            &d,
            &weights,
            &path,
            stratum_sizes,
            0.05,
            QuantileMode::ChiSquared,
            VarianceKind::Heteroskedastic,
            Vec::new(),
        );
        assert_eq!(via_aipw.mu_hat.to_bits(), direct.mu_hat.to_bits());
        assert_eq!(via_aipw.v_hat.to_bits(), direct.v_hat.to_bits());
    }

    #[test]
    fn naive_lasso_all_zero_covariates_gives_stratum_mean_difference() {
        // With no covariate signal the pooled regression keeps only the
        // treatment columns and intercept; the contrast equals the
        // difference in treatment coefficients.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 300;
        let mut x = Array3::<f64>::zeros((n, 2, 1));
        let mut d = A2::<u8>::zeros((n, 2));
        let mut y = A2::<f64>::zeros((n, 2));
        for i in 0..n {
            x[(i, 0, 0)] = 0.0;
            x[(i, 1, 0)] = 0.0;
            d[(i, 0)] = u8::from(rng.gen_bool(0.5));
            d[(i, 1)] = u8::from(rng.gen_bool(0.5));
            y[(i, 0)] = f64::from(d[(i, 0)]);
            y[(i, 1)] = 2.0 * f64::from(d[(i, 0)]) + 3.0 * f64::from(d[(i, 1)]) + 1.0;
        }
        let ids = (0..n).map(|i| format!("u{i}")).collect();
        let panel = PanelDataset::new(ids, x, d, y).unwrap();
        let cfg = LassoConfig {
            lambda_override: Some(1e-8),
            ..Default::default()
        };
        let ones = TreatmentHistory::new(vec![1, 1]).unwrap();
        let zeros = TreatmentHistory::new(vec![0, 0]).unwrap();
        let hi = naive_lasso_estimate(&panel, &ones, &cfg).unwrap();
        let lo = naive_lasso_estimate(&panel, &zeros, &cfg).unwrap();
        assert_abs_diff_eq!(hi - lo, 5.0, epsilon = 1e-6);
    }

    #[test]
    fn sequential_exact_on_noiseless_linear_dgp() {
        let panel = linear_panel(400, 21);
        let cfg = LassoConfig {
            lambda_override: Some(1e-9),
            tol: 1e-11,
            max_iter: 100_000,
            ..Default::default()
        };
        let ones = TreatmentHistory::new(vec![1, 1]).unwrap();
        let zeros = TreatmentHistory::new(vec![0, 0]).unwrap();
        let hi = sequential_estimate(&panel, &ones, &cfg).unwrap();
        let lo = sequential_estimate(&panel, &zeros, &cfg).unwrap();
        // Y_2(1,1) − Y_2(0,0) = d2 + (1 + 1)·d1 = 3 on this DGP.
        assert_abs_diff_eq!(hi - lo, 3.0, epsilon = 1e-3);
    }

    #[test]
    fn sequential_one_period_is_plain_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 150;
        let mut x = Array3::<f64>::zeros((n, 1, 2));
        let mut d = A2::<u8>::zeros((n, 1));
        let mut y = A2::<f64>::zeros((n, 1));
        for i in 0..n {
            x[(i, 0, 0)] = normal(&mut rng);
            x[(i, 0, 1)] = normal(&mut rng);
            d[(i, 0)] = u8::from(rng.gen_bool(0.5));
            y[(i, 0)] = 2.0 * x[(i, 0, 0)] + f64::from(d[(i, 0)]);
        }
        let ids = (0..n).map(|i| format!("u{i}")).collect();
        let panel = PanelDataset::new(ids, x, d, y).unwrap();
        let cfg = LassoConfig {
            lambda_override: Some(1e-9),
            ..Default::default()
        };
        let d1 = TreatmentHistory::new(vec![1]).unwrap();
        let est = sequential_estimate(&panel, &d1, &cfg).unwrap();
        // One period: the forward recursion is a plain prediction at the
        // observed baselines, 2·x̄₀ + 1 on this noiseless outcome.
        let xbar0: f64 = (0..n).map(|i| panel.x(i, 1, 0)).sum::<f64>() / n as f64;
        assert_abs_diff_eq!(est, 2.0 * xbar0 + 1.0, epsilon = 1e-6);
    }
}
