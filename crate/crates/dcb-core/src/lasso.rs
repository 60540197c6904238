//! L1-penalized least squares via cyclic coordinate descent.
//!
//! Columns are standardized internally (centered when an intercept column is
//! present, scaled to unit root-mean-square); the penalty applies on the
//! standardized scale and coefficients are returned on the original scale.
//! Unpenalized columns (intercept, treatment indicators) are never
//! soft-thresholded.

use ndarray::ArrayView2;

use crate::error::{DcbError, Result};

/// Result of a single Lasso fit.
#[derive(Debug, Clone)]
pub struct LassoFit {
    /// Coefficients on the original column scale.
    pub coef: Vec<f64>,
    /// Detected intercept column (constant, unpenalized), if any.
    pub intercept_index: Option<usize>,
    pub lambda: f64,
    pub penalty_mask: Vec<bool>,
    /// Coordinate-descent sweeps used.
    pub n_iter: usize,
    pub converged: bool,
    /// Objective value after each sweep (standardized problem); used to
    /// check the per-sweep descent property.
    pub objective_trace: Vec<f64>,
}

impl LassoFit {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        row.iter().zip(&self.coef).map(|(x, b)| x * b).sum()
    }
}

pub fn soft_threshold(z: f64, lambda: f64) -> f64 {
    if z > lambda {
        z - lambda
    } else if z < -lambda {
        z + lambda
    } else {
        0.0
    }
}

/// Column-major standardized design plus the bookkeeping needed to map
/// solutions back to the original scale.
struct Standardized {
    n: usize,
    p: usize,
    /// Flat column-major standardized entries (skipped columns left zero).
    cols: Vec<f64>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// Columns excluded from descent: the intercept and zero-variance columns.
    skip: Vec<bool>,
    intercept_index: Option<usize>,
    intercept_value: f64,
    y_mean: f64,
    y_centered: Vec<f64>,
}

const ZERO_VAR: f64 = 1e-12;

fn standardize(x: ArrayView2<'_, f64>, y: &[f64], penalty_mask: &[bool]) -> Result<Standardized> {
    let (n, p) = x.dim();
    if n == 0 || y.len() != n || penalty_mask.len() != p {
        return Err(DcbError::InvalidArgument(
            "design, response, and penalty mask dimensions disagree".into(),
        ));
    }
    if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
        return Err(DcbError::NonFinite {
            what: "lasso design or response".into(),
        });
    }

    let nf = n as f64;
    let mut mean = vec![0.0; p];
    let mut is_const = vec![false; p];
    for j in 0..p {
        let col = x.column(j);
        let m = col.sum() / nf;
        mean[j] = m;
        is_const[j] = col.iter().all(|&v| (v - m).abs() < ZERO_VAR * (1.0 + m.abs()));
    }

    // The first constant nonzero unpenalized column acts as the intercept;
    // with one present, every other column and the response are centered.
    let intercept_index = (0..p)
        .find(|&j| !penalty_mask[j] && is_const[j] && mean[j].abs() > ZERO_VAR);
    let center = intercept_index.is_some();

    let y_mean = if center { y.iter().sum::<f64>() / nf } else { 0.0 };
    let y_centered: Vec<f64> = y.iter().map(|&v| v - y_mean).collect();

    let mut cols = vec![0.0; n * p];
    let mut scale = vec![1.0; p];
    let mut skip = vec![false; p];
    for j in 0..p {
        if Some(j) == intercept_index || is_const[j] {
            // Constant columns are either the intercept (recovered after the
            // fit) or collinear with it; both stay out of the descent.
            skip[j] = true;
            continue;
        }
        let m = if center { mean[j] } else { 0.0 };
        let col = x.column(j);
        let ss: f64 = col.iter().map(|&v| (v - m) * (v - m)).sum();
        let s = (ss / nf).sqrt();
        if s < ZERO_VAR {
            skip[j] = true;
            continue;
        }
        scale[j] = s;
        let dst = &mut cols[j * n..(j + 1) * n];
        for (i, &v) in col.iter().enumerate() {
            dst[i] = (v - m) / s;
        }
    }

    let intercept_value = intercept_index.map_or(1.0, |j| mean[j]);
    Ok(Standardized {
        n,
        p,
        cols,
        mean: if center { mean } else { vec![0.0; p] },
        scale,
        skip,
        intercept_index,
        intercept_value,
        y_mean,
        y_centered,
    })
}

/// One cyclic sweep over the given coordinates; returns the largest
/// coefficient change. Standardized columns have unit mean square, so the
/// per-coordinate curvature is 1.
fn sweep(
    std: &Standardized,
    coords: &[usize],
    penalty_mask: &[bool],
    lambda: f64,
    beta: &mut [f64],
    residual: &mut [f64],
) -> f64 {
    let n = std.n;
    let nf = n as f64;
    let mut max_change = 0.0f64;
    for &j in coords {
        let col = &std.cols[j * n..(j + 1) * n];
        let mut dot = 0.0;
        for i in 0..n {
            dot += col[i] * residual[i];
        }
        let z = beta[j] + dot / nf;
        let new = if penalty_mask[j] {
            soft_threshold(z, lambda)
        } else {
            z
        };
        let delta = new - beta[j];
        if delta != 0.0 {
            for i in 0..n {
                residual[i] -= delta * col[i];
            }
            beta[j] = new;
            max_change = max_change.max(delta.abs());
        }
    }
    max_change
}

fn objective(std: &Standardized, penalty_mask: &[bool], lambda: f64, beta: &[f64], residual: &[f64]) -> f64 {
    let nf = std.n as f64;
    let rss: f64 = residual.iter().map(|r| r * r).sum();
    let l1: f64 = beta
        .iter()
        .zip(penalty_mask)
        .filter(|(_, &m)| m)
        .map(|(b, _)| b.abs())
        .sum();
    rss / (2.0 * nf) + lambda * l1
}

struct CdState {
    beta: Vec<f64>,
    residual: Vec<f64>,
    sweeps: usize,
    converged: bool,
    trace: Vec<f64>,
}

/// Runs coordinate descent at one penalty level from a warm start, using
/// full sweeps interleaved with active-set sweeps.
fn descend(
    std: &Standardized,
    penalty_mask: &[bool],
    lambda: f64,
    tol: f64,
    max_iter: usize,
    state: &mut CdState,
) {
    let all: Vec<usize> = (0..std.p).filter(|&j| !std.skip[j]).collect();
    state.converged = false;
    loop {
        let change = sweep(std, &all, penalty_mask, lambda, &mut state.beta, &mut state.residual);
        state.sweeps += 1;
        state
            .trace
            .push(objective(std, penalty_mask, lambda, &state.beta, &state.residual));
        if change <= tol {
            state.converged = true;
            return;
        }
        if state.sweeps >= max_iter {
            return;
        }
        let active: Vec<usize> = all
            .iter()
            .copied()
            .filter(|&j| state.beta[j] != 0.0 || !penalty_mask[j])
            .collect();
        loop {
            let change = sweep(std, &active, penalty_mask, lambda, &mut state.beta, &mut state.residual);
            state.sweeps += 1;
            state
                .trace
                .push(objective(std, penalty_mask, lambda, &state.beta, &state.residual));
            if change <= tol || state.sweeps >= max_iter {
                break;
            }
        }
        if state.sweeps >= max_iter {
            return;
        }
    }
}

fn destandardize(std: &Standardized, beta_std: &[f64]) -> (Vec<f64>, Option<usize>) {
    let mut coef = vec![0.0; std.p];
    for j in 0..std.p {
        if !std.skip[j] {
            coef[j] = beta_std[j] / std.scale[j];
        }
    }
    if let Some(ic) = std.intercept_index {
        let shift: f64 = (0..std.p).map(|j| coef[j] * std.mean[j]).sum();
        coef[ic] = (std.y_mean - shift) / std.intercept_value;
    }
    (coef, std.intercept_index)
}

/// Minimizes `(1/2n)‖y − Xβ‖² + λ Σ_j s_j |β_j|` over the penalized columns
/// (s_j is the internal standardization scale). Returns a fit with
/// `converged = false` rather than aborting when the sweep cap is hit.
pub fn lasso_fit(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    lambda: f64,
    penalty_mask: &[bool],
    tol: f64,
    max_iter: usize,
) -> Result<LassoFit> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(DcbError::InvalidArgument("lambda must be >= 0".into()));
    }
    if tol <= 0.0 {
        return Err(DcbError::InvalidArgument("tol must be > 0".into()));
    }
    let std = standardize(x, y, penalty_mask)?;
    let mut state = CdState {
        beta: vec![0.0; std.p],
        residual: std.y_centered.clone(),
        sweeps: 0,
        converged: false,
        trace: Vec::new(),
    };
    descend(&std, penalty_mask, lambda, tol, max_iter, &mut state);
    let (coef, intercept_index) = destandardize(&std, &state.beta);
    Ok(LassoFit {
        coef,
        intercept_index,
        lambda,
        penalty_mask: penalty_mask.to_vec(),
        n_iter: state.sweeps,
        converged: state.converged,
        objective_trace: state.trace,
    })
}

/// Solution path over a descending grid with warm starts. Returns the
/// original-scale coefficient vectors, one per grid value.
pub fn lasso_path(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    lambdas: &[f64],
    penalty_mask: &[bool],
    tol: f64,
    max_iter: usize,
) -> Result<Vec<Vec<f64>>> {
    let std = standardize(x, y, penalty_mask)?;
    let mut state = CdState {
        beta: vec![0.0; std.p],
        residual: std.y_centered.clone(),
        sweeps: 0,
        converged: false,
        trace: Vec::new(),
    };
    let mut out = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        state.sweeps = 0;
        descend(&std, penalty_mask, lambda, tol, max_iter, &mut state);
        out.push(destandardize(&std, &state.beta).0);
    }
    Ok(out)
}

/// Largest penalty that zeroes every penalized coefficient (computed on the
/// residual after fitting the unpenalized block alone), then a log-spaced
/// descending grid down to `lambda_max * ratio`.
pub fn lambda_grid(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    penalty_mask: &[bool],
    len: usize,
    ratio: f64,
) -> Result<Vec<f64>> {
    let std = standardize(x, y, penalty_mask)?;
    let mut state = CdState {
        beta: vec![0.0; std.p],
        residual: std.y_centered.clone(),
        sweeps: 0,
        converged: false,
        trace: Vec::new(),
    };
    // Fit only the unpenalized block: with a huge penalty each penalized
    // coordinate stays at zero.
    descend(&std, penalty_mask, f64::MAX / 4.0, 1e-10, 1000, &mut state);
    let nf = std.n as f64;
    let mut lambda_max = 0.0f64;
    for j in 0..std.p {
        if std.skip[j] || !penalty_mask[j] {
            continue;
        }
        let col = &std.cols[j * std.n..(j + 1) * std.n];
        let dot: f64 = col.iter().zip(&state.residual).map(|(c, r)| c * r).sum();
        lambda_max = lambda_max.max((dot / nf).abs());
    }
    if lambda_max <= 0.0 {
        lambda_max = 1.0;
    }
    let len = len.max(2);
    let log_hi = lambda_max.ln();
    let log_lo = (lambda_max * ratio).ln();
    Ok((0..len)
        .map(|k| (log_hi + (log_lo - log_hi) * k as f64 / (len - 1) as f64).exp())
        .collect())
}

/// K-fold cross-validation over a descending grid: returns the grid value
/// minimizing mean out-of-fold squared error, ties broken toward the larger
/// (sparser) penalty. Fold assignment is a seeded permutation, deterministic
/// given `seed`.
pub fn cross_validate_lambda(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    penalty_mask: &[bool],
    k: usize,
    grid: &[f64],
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<f64> {
    let n = y.len();
    if k < 2 {
        return Err(DcbError::InvalidArgument("need at least 2 folds".into()));
    }
    if n < k {
        return Err(DcbError::TooFewRows { n, k });
    }
    if grid.is_empty() || grid.iter().any(|&l| l <= 0.0) {
        return Err(DcbError::InvalidArgument(
            "lambda grid must be nonempty and positive".into(),
        ));
    }
    if grid.windows(2).any(|w| w[0] < w[1]) {
        return Err(DcbError::InvalidArgument(
            "lambda grid must be sorted descending".into(),
        ));
    }

    // Deterministic shuffled fold assignment.
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let fold_of: Vec<usize> = {
        let mut f = vec![0; n];
        for (rank, &i) in order.iter().enumerate() {
            f[i] = rank % k;
        }
        f
    };

    let p = x.ncols();
    let mut sse = vec![0.0f64; grid.len()];
    for fold in 0..k {
        let train_idx: Vec<usize> = (0..n).filter(|&i| fold_of[i] != fold).collect();
        let test_idx: Vec<usize> = (0..n).filter(|&i| fold_of[i] == fold).collect();
        let mut xtr = ndarray::Array2::<f64>::zeros((train_idx.len(), p));
        let mut ytr = Vec::with_capacity(train_idx.len());
        for (r, &i) in train_idx.iter().enumerate() {
            xtr.row_mut(r).assign(&x.row(i));
            ytr.push(y[i]);
        }
        let path = lasso_path(xtr.view(), &ytr, grid, penalty_mask, tol, max_iter)?;
        for (g, coef) in path.iter().enumerate() {
            for &i in &test_idx {
                let pred: f64 = x.row(i).iter().zip(coef).map(|(v, b)| v * b).sum();
                let e = y[i] - pred;
                sse[g] += e * e;
            }
        }
    }

    let mut best = 0;
    for g in 1..grid.len() {
        if sse[g] < sse[best] {
            best = g;
        }
    }
    Ok(grid[best])
}
