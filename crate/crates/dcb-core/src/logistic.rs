//! L1-penalized logistic regression for propensity estimation: iteratively
//! reweighted least squares with a weighted coordinate-descent inner loop.
//! Shares the standardization conventions of the Lasso module; predicted
//! probabilities are clipped away from 0 and 1 before use in any weight
//! denominator.

use ndarray::ArrayView2;

use crate::error::{DcbError, Result};
use crate::lasso::soft_threshold;

/// Probability clipping floor shared across the crate.
pub const PROB_CLIP: f64 = 1e-6;

/// Hard clamp on the linear predictor inside the IRLS loop.
const ETA_CAP: f64 = 30.0;

/// Fitted predictors beyond this magnitude at λ = 0 mean the likelihood is
/// saturating: probabilities within ~3e-7 of 0/1, i.e. (quasi-)separation.
const SEP_ETA: f64 = 15.0;

#[derive(Debug, Clone)]
pub struct LogisticFit {
    /// Coefficients on the original column scale.
    pub coef: Vec<f64>,
    pub lambda: f64,
    pub converged: bool,
    /// Set when the fit ran against perfect separation; coefficients are
    /// capped rather than divergent.
    pub separation: bool,
}

impl LogisticFit {
    pub fn linear_predictor(&self, row: &[f64]) -> f64 {
        row.iter().zip(&self.coef).map(|(x, b)| x * b).sum()
    }

    /// P(d = 1 | row), clipped to [PROB_CLIP, 1 - PROB_CLIP].
    pub fn predict_prob(&self, row: &[f64]) -> f64 {
        let eta = self.linear_predictor(row);
        sigmoid(eta).clamp(PROB_CLIP, 1.0 - PROB_CLIP)
    }
}

pub fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Maximizes `(1/n) Σ log-lik − λ Σ_j s_j |β_j|` over the penalized columns
/// by proximal Newton (IRLS with coordinate-descent inner solves).
pub fn logistic_fit(
    x: ArrayView2<'_, f64>,
    d: &[u8],
    lambda: f64,
    penalty_mask: &[bool],
    tol: f64,
    max_iter: usize,
) -> Result<LogisticFit> {
    let (n, p) = x.dim();
    if n == 0 || d.len() != n || penalty_mask.len() != p {
        return Err(DcbError::InvalidArgument(
            "logistic design, response, and mask dimensions disagree".into(),
        ));
    }
    if d.iter().any(|&v| v > 1) {
        return Err(DcbError::InvalidArgument("response must be 0/1".into()));
    }
    if lambda < 0.0 {
        return Err(DcbError::InvalidArgument("lambda must be >= 0".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(DcbError::NonFinite {
            what: "logistic design".into(),
        });
    }
    let n_ones = d.iter().filter(|&&v| v == 1).count();
    if n_ones == 0 || n_ones == n {
        // Degenerate response: the unpenalized MLE diverges.
        return Err(DcbError::SeparationDetected);
    }

    // Standardize: center when an unpenalized constant column is present.
    let nf = n as f64;
    let mut mean = vec![0.0; p];
    let mut is_const = vec![false; p];
    for j in 0..p {
        let col = x.column(j);
        let m = col.sum() / nf;
        mean[j] = m;
        is_const[j] = col.iter().all(|&v| (v - m).abs() < 1e-12 * (1.0 + m.abs()));
    }
    let intercept_index =
        (0..p).find(|&j| !penalty_mask[j] && is_const[j] && mean[j].abs() > 1e-12);
    let center = intercept_index.is_some();
    let mut cols = vec![0.0; n * p];
    let mut scale = vec![1.0; p];
    let mut skip = vec![false; p];
    for j in 0..p {
        if Some(j) == intercept_index || is_const[j] {
            skip[j] = true;
            continue;
        }
        let m = if center { mean[j] } else { 0.0 };
        let col = x.column(j);
        let ss: f64 = col.iter().map(|&v| (v - m) * (v - m)).sum();
        let s = (ss / nf).sqrt();
        if s < 1e-12 {
            skip[j] = true;
            continue;
        }
        scale[j] = s;
        for (i, &v) in col.iter().enumerate() {
            cols[j * n + i] = (v - m) / s;
        }
    }

    let mut beta = vec![0.0; p]; // standardized scale
    let base = d.iter().map(|&v| f64::from(v)).sum::<f64>() / nf;
    let mut alpha = if center { logit(base) } else { 0.0 };
    let mut eta: Vec<f64> = vec![alpha; n];
    if !center {
        eta.fill(0.0);
        alpha = 0.0;
    }

    let mut converged = false;
    for _outer in 0..max_iter.max(1) {
        // Quadratic approximation at the current linear predictor.
        let mut w = vec![0.0; n];
        let mut r = vec![0.0; n];
        for i in 0..n {
            let pi = sigmoid(eta[i]);
            let wi = (pi * (1.0 - pi)).max(1e-5);
            w[i] = wi;
            // Working residual z_i - eta_i.
            r[i] = (f64::from(d[i]) - pi) / wi;
        }

        // Weighted coordinate descent on the working response.
        let mut delta_outer = 0.0f64;
        for _sweep in 0..50 {
            let mut max_change = 0.0f64;
            if center {
                let sw: f64 = w.iter().sum();
                let num: f64 = (0..n).map(|i| w[i] * r[i]).sum();
                let da = num / sw;
                if da != 0.0 {
                    for ri in r.iter_mut() {
                        *ri -= da;
                    }
                    alpha += da;
                    max_change = max_change.max(da.abs());
                }
            }
            for j in 0..p {
                if skip[j] {
                    continue;
                }
                let col = &cols[j * n..(j + 1) * n];
                let mut num = 0.0;
                let mut den = 0.0;
                for i in 0..n {
                    num += w[i] * col[i] * r[i];
                    den += w[i] * col[i] * col[i];
                }
                if den <= 1e-12 {
                    continue;
                }
                let num_n = num / nf + (den / nf) * beta[j];
                let new = if penalty_mask[j] {
                    soft_threshold(num_n, lambda) / (den / nf)
                } else {
                    num_n / (den / nf)
                };
                let delta = new - beta[j];
                if delta != 0.0 {
                    for i in 0..n {
                        r[i] -= delta * col[i];
                    }
                    beta[j] = new;
                    max_change = max_change.max(delta.abs());
                }
            }
            delta_outer = delta_outer.max(max_change);
            if max_change <= tol * 0.1 {
                break;
            }
        }

        // Refresh the linear predictor.
        for i in 0..n {
            let mut acc = alpha;
            for j in 0..p {
                if !skip[j] {
                    acc += cols[j * n + i] * beta[j];
                }
            }
            eta[i] = acc.clamp(-ETA_CAP, ETA_CAP);
        }
        if delta_outer <= tol {
            converged = true;
            break;
        }
    }

    // Destandardize.
    let mut coef = vec![0.0; p];
    for j in 0..p {
        if !skip[j] {
            coef[j] = beta[j] / scale[j];
        }
    }
    if let Some(ic) = intercept_index {
        let shift: f64 = (0..p).map(|j| coef[j] * mean[j]).sum();
        coef[ic] = (alpha - shift) / mean[ic];
    }

    let separation = lambda == 0.0
        && (0..n).any(|i| {
            let row_eta: f64 = x.row(i).iter().zip(&coef).map(|(v, b)| v * b).sum();
            row_eta.abs() >= SEP_ETA
        });

    Ok(LogisticFit {
        coef,
        lambda,
        converged,
        separation,
    })
}

/// K-fold cross-validation on out-of-fold deviance over a descending grid.
pub fn cross_validate_logistic(
    x: ArrayView2<'_, f64>,
    d: &[u8],
    penalty_mask: &[bool],
    k: usize,
    grid: &[f64],
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<f64> {
    let n = d.len();
    if k < 2 {
        return Err(DcbError::InvalidArgument("need at least 2 folds".into()));
    }
    if n < k {
        return Err(DcbError::TooFewRows { n, k });
    }
    if grid.is_empty() {
        return Err(DcbError::InvalidArgument("lambda grid is empty".into()));
    }
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut fold_of = vec![0usize; n];
    for (rank, &i) in order.iter().enumerate() {
        fold_of[i] = rank % k;
    }

    let p = x.ncols();
    let mut deviance = vec![0.0f64; grid.len()];
    for fold in 0..k {
        let train_idx: Vec<usize> = (0..n).filter(|&i| fold_of[i] != fold).collect();
        let test_idx: Vec<usize> = (0..n).filter(|&i| fold_of[i] == fold).collect();
        let mut xtr = ndarray::Array2::<f64>::zeros((train_idx.len(), p));
        let mut dtr = Vec::with_capacity(train_idx.len());
        for (r, &i) in train_idx.iter().enumerate() {
            xtr.row_mut(r).assign(&x.row(i));
            dtr.push(d[i]);
        }
        for (g, &lambda) in grid.iter().enumerate() {
            let fit = match logistic_fit(xtr.view(), &dtr, lambda, penalty_mask, tol, max_iter) {
                Ok(f) => f,
                Err(DcbError::SeparationDetected) => continue,
                Err(e) => return Err(e),
            };
            for &i in &test_idx {
                let row: Vec<f64> = x.row(i).iter().cloned().collect();
                let prob = fit.predict_prob(&row);
                let ll = if d[i] == 1 { prob.ln() } else { (1.0 - prob).ln() };
                deviance[g] -= 2.0 * ll;
            }
        }
    }
    let mut best = 0;
    for g in 1..grid.len() {
        if deviance[g] < deviance[best] {
            best = g;
        }
    }
    Ok(grid[best])
}
