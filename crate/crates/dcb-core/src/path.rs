//! Recursive estimation of the per-period projection coefficients: the
//! end-line outcome is regressed on the period-T history, then each fitted
//! value is projected back one period at a time.
//!
//! Two specifications are supported. `FullInteractions` fits each stage on
//! the subsample whose realized assignments match the target prefix, so
//! coefficients differ freely across treatment histories. `Linear` appends
//! the current-period treatment as an unpenalized regressor, fits on the
//! whole sample, and substitutes the target assignment into the treatment
//! column before predicting.

use ndarray::Array2;

use crate::error::{DcbError, Result};
use crate::lasso::{cross_validate_lambda, lambda_grid, lasso_fit, LassoFit};
use crate::panel::{build_history, match_mask, HistoryOpts, PanelDataset, TreatmentHistory};

/// Model specification for the coefficient recursion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathMode {
    FullInteractions,
    Linear,
}

/// Settings for each penalized stage fit.
#[derive(Debug, Clone)]
pub struct LassoConfig {
    pub folds: usize,
    pub grid_len: usize,
    pub grid_ratio: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub cv_seed: u64,
    /// Fixed penalty; skips cross-validation when set.
    pub lambda_override: Option<f64>,
    /// Refit the selected support unpenalized after the penalized fit,
    /// removing shrinkage from the retained coefficients.
    pub relaxed: bool,
}

impl Default for LassoConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            grid_len: 50,
            grid_ratio: 1e-3,
            tol: 1e-7,
            max_iter: 10_000,
            cv_seed: 0,
            lambda_override: None,
            relaxed: false,
        }
    }
}

/// Fitted coefficient path for one target history.
#[derive(Debug, Clone)]
pub struct CoefficientPath {
    pub target: TreatmentHistory,
    pub mode: PathMode,
    /// betas[t-1]: coefficients at period t. In `Linear` mode the design is
    /// `[H_t, D_t]` (the appended treatment column is last); in
    /// `FullInteractions` mode it is `H_t`.
    pub betas: Vec<Vec<f64>>,
    /// fitted[t-1][i]: the projected end-line outcome for unit i given its
    /// period-t history, with the target assignment substituted for the
    /// current-period treatment in `Linear` mode. Computed for every unit;
    /// only rows carrying weight enter any estimate.
    pub fitted: Vec<Vec<f64>>,
    /// Penalty selected at each period.
    pub lambdas: Vec<f64>,
    /// Stage fits, kept for diagnostics (selected support, convergence).
    pub stage_converged: Vec<bool>,
}

impl CoefficientPath {
    pub fn n_periods(&self) -> usize {
        self.betas.len()
    }
}

fn select_lambda(
    x: ndarray::ArrayView2<'_, f64>,
    y: &[f64],
    mask: &[bool],
    cfg: &LassoConfig,
    stage_seed: u64,
) -> Result<f64> {
    if let Some(l) = cfg.lambda_override {
        return Ok(l);
    }
    let grid = lambda_grid(x, y, mask, cfg.grid_len, cfg.grid_ratio)?;
    cross_validate_lambda(
        x,
        y,
        mask,
        cfg.folds,
        &grid,
        cfg.tol,
        cfg.max_iter,
        stage_seed,
    )
}

fn stage_fit(
    x: ndarray::ArrayView2<'_, f64>,
    y: &[f64],
    mask: &[bool],
    cfg: &LassoConfig,
    stage_seed: u64,
) -> Result<LassoFit> {
    let lambda = select_lambda(x, y, mask, cfg, stage_seed)?;
    let fit = lasso_fit(x, y, lambda, mask, cfg.tol, cfg.max_iter)?;
    if !cfg.relaxed {
        return Ok(fit);
    }
    // Relaxed refit: keep the selected support, drop the shrinkage. The
    // discarded columns stay pinned at zero via an effectively infinite
    // penalty.
    let p = mask.len();
    let support: Vec<bool> = (0..p)
        .map(|j| !mask[j] || fit.coef[j] != 0.0)
        .collect();
    if support.iter().all(|&s| s) {
        return lasso_fit(x, y, 0.0, mask, cfg.tol, cfg.max_iter);
    }
    let keep: Vec<usize> = (0..p).filter(|&j| support[j]).collect();
    let mut xs = ndarray::Array2::<f64>::zeros((y.len(), keep.len()));
    for (c, &j) in keep.iter().enumerate() {
        xs.column_mut(c).assign(&x.column(j));
    }
    let sub_mask = vec![false; keep.len()];
    let refit = lasso_fit(xs.view(), y, 0.0, &sub_mask, cfg.tol, cfg.max_iter)?;
    let mut coef = vec![0.0; p];
    for (c, &j) in keep.iter().enumerate() {
        coef[j] = refit.coef[c];
    }
    Ok(LassoFit {
        coef,
        intercept_index: fit.intercept_index,
        lambda,
        penalty_mask: mask.to_vec(),
        n_iter: fit.n_iter + refit.n_iter,
        converged: fit.converged && refit.converged,
        objective_trace: refit.objective_trace,
    })
}

/// Fits the coefficient recursion for `d` (length = panel periods).
pub fn fit_coefficient_path(
    data: &PanelDataset,
    d: &TreatmentHistory,
    mode: PathMode,
    cfg: &LassoConfig,
    opts: HistoryOpts,
) -> Result<CoefficientPath> {
    let t_max = data.n_periods();
    if d.len() != t_max {
        return Err(DcbError::InvalidArgument(format!(
            "target history length {} != panel periods {t_max}",
            d.len()
        )));
    }
    let n = data.n_units();

    let mut betas: Vec<Vec<f64>> = vec![Vec::new(); t_max];
    let mut fitted: Vec<Vec<f64>> = vec![Vec::new(); t_max];
    let mut lambdas = vec![0.0; t_max];
    let mut stage_converged = vec![false; t_max];

    // response at stage t: end-line outcomes at t = T, otherwise the fitted
    // projections from stage t+1.
    let mut response: Vec<f64> = data.endline_outcomes();

    for t in (1..=t_max).rev() {
        let h = build_history(data, t, opts)?;
        let w = h.width();
        let stage_seed = cfg.cv_seed.wrapping_mul(1000).wrapping_add(t as u64);

        match mode {
            PathMode::Linear => {
                // Design [H_t, D_t]; treatments and intercept unpenalized.
                let mut x = Array2::<f64>::zeros((n, w + 1));
                for i in 0..n {
                    for j in 0..w {
                        x[(i, j)] = h.rows[(i, j)];
                    }
                    x[(i, w)] = f64::from(data.d(i, t));
                }
                let mut mask = vec![true; w + 1];
                for j in h.treat_cols.clone() {
                    mask[j] = false;
                }
                if let Some(ic) = h.intercept_col {
                    mask[ic] = false;
                }
                mask[w] = false;

                let fit = stage_fit(x.view(), &response, &mask, cfg, stage_seed)?;
                // Substitute the target assignment before predicting.
                let dt = f64::from(d.bits()[t - 1]);
                let mut pred = vec![0.0; n];
                for i in 0..n {
                    let mut acc = dt * fit.coef[w];
                    for j in 0..w {
                        acc += h.rows[(i, j)] * fit.coef[j];
                    }
                    pred[i] = acc;
                }
                lambdas[t - 1] = fit.lambda;
                stage_converged[t - 1] = fit.converged;
                betas[t - 1] = fit.coef;
                fitted[t - 1] = pred.clone();
                response = pred;
            }
            PathMode::FullInteractions => {
                let prefix = d.prefix(t);
                let mask_units = match_mask(data, &prefix);
                let idx: Vec<usize> = (0..n).filter(|&i| mask_units[i]).collect();
                if idx.is_empty() {
                    return Err(DcbError::EmptyStratum {
                        prefix: prefix.to_string(),
                    });
                }
                let mut x = Array2::<f64>::zeros((idx.len(), w));
                let mut y = Vec::with_capacity(idx.len());
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..w {
                        x[(r, j)] = h.rows[(i, j)];
                    }
                    y.push(response[i]);
                }
                let mut mask = vec![true; w];
                for j in h.treat_cols.clone() {
                    mask[j] = false;
                }
                if let Some(ic) = h.intercept_col {
                    mask[ic] = false;
                }

                let fit = stage_fit(x.view(), &y, &mask, cfg, stage_seed)?;
                let mut pred = vec![0.0; n];
                for i in 0..n {
                    pred[i] = h.dot_row(i, &fit.coef);
                }
                lambdas[t - 1] = fit.lambda;
                stage_converged[t - 1] = fit.converged;
                betas[t - 1] = fit.coef;
                fitted[t - 1] = pred.clone();
                response = pred;
            }
        }
    }

    Ok(CoefficientPath {
        target: d.clone(),
        mode,
        betas,
        fitted,
        lambdas,
        stage_converged,
    })
}
