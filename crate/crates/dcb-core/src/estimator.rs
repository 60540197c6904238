//! Point estimator, variance, and confidence intervals for mean potential
//! outcomes under a treatment history, plus ATE contrasts.
//!
//! The estimator combines the end-line outcomes under the final weights
//! with telescoped regression corrections from each period:
//!
//! ```text
//!   μ̂ = Σ_i γ_{i,T} Y_{i,T}
//!       − Σ_{t=2}^T Σ_i (γ_{i,t} − γ_{i,t−1}) f_{i,t}
//!       − Σ_i (γ_{i,1} − 1/n) f_{i,1}
//! ```
//!
//! where f_{i,t} is the fitted period-t projection of the end-line outcome.
//! Weights are normalized to sum to one within each period, which absorbs
//! the 1/n prefactor convention.

use serde::Serialize;

use crate::balance::{solve_weight_sequence, tune_constraints, BalanceConfig, BalanceWeights,
    GridConfig, TunedBalance};
use crate::error::{DcbError, Result};
use crate::panel::{match_mask, HistoryOpts, PanelDataset, TreatmentHistory};
use crate::path::{fit_coefficient_path, CoefficientPath, LassoConfig, PathMode};
use crate::stats::{chi_quantile, normal_quantile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantileMode {
    ChiSquared,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceKind {
    Heteroskedastic,
    Homoskedastic,
}

/// Residuals entering the variance: end-line residuals on the full target
/// path and per-period projection increments on each prefix stratum.
#[derive(Debug, Clone)]
pub struct ResidualSet {
    /// (unit, Y_T − f_T) over units matching the full history.
    pub eps: Vec<(usize, f64)>,
    /// nu[t-1]: (unit, f_{t+1} − f_t) over units matching d_{1:t}, for
    /// t = 1..T−1.
    pub nu: Vec<Vec<(usize, f64)>>,
}

/// Second moments of the residuals per period, for report diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct ResidualMoment {
    pub period: usize,
    pub kind: String,
    pub mean_sq: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct WeightDiagnostics {
    pub max_weight: Vec<f64>,
    pub effective_sample_size: Vec<f64>,
    pub stratum_sizes: Vec<usize>,
}

/// Full inference report. Both quantile calibrations are always computed;
/// `ci` repeats the one selected by `mode`.
#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    pub mu_hat: f64,
    pub v_hat: f64,
    pub ci: (f64, f64),
    pub alpha: f64,
    pub mode: QuantileMode,
    pub variance: VarianceKind,
    pub df: usize,
    pub n_units: usize,
    pub t_periods: usize,
    pub v_hat_homoskedastic: f64,
    pub ci_chi_squared: (f64, f64),
    pub ci_gaussian: (f64, f64),
    pub residual_summary: Vec<ResidualMoment>,
    pub diagnostics: WeightDiagnostics,
    pub warnings: Vec<String>,
}

/// The raw point-estimate formula given end-line outcomes, the per-period
/// weight vectors, and the per-period fitted projections.
pub fn point_estimate(y_end: &[f64], gamma: &[Vec<f64>], fitted: &[Vec<f64>]) -> f64 {
    let t_max = gamma.len();
    let n = y_end.len();
    let nf = n as f64;
    let g_last = &gamma[t_max - 1];
    let mut mu: f64 = (0..n).map(|i| g_last[i] * y_end[i]).sum();
    for t in (2..=t_max).rev() {
        let g_t = &gamma[t - 1];
        let g_prev = &gamma[t - 2];
        let f_t = &fitted[t - 1];
        mu -= (0..n).map(|i| (g_t[i] - g_prev[i]) * f_t[i]).sum::<f64>();
    }
    let g1 = &gamma[0];
    let f1 = &fitted[0];
    mu - (0..n).map(|i| (g1[i] - 1.0 / nf) * f1[i]).sum::<f64>()
}

/// Residuals for the variance, restricted to the strata that carry weight.
pub fn residual_set(
    data: &PanelDataset,
    d: &TreatmentHistory,
    coef_path: &CoefficientPath,
) -> ResidualSet {
    let t_max = d.len();
    let full = match_mask(data, d);
    let y_end = data.endline_outcomes();
    let eps: Vec<(usize, f64)> = (0..data.n_units())
        .filter(|&i| full[i])
        .map(|i| (i, y_end[i] - coef_path.fitted[t_max - 1][i]))
        .collect();
    let mut nu = Vec::with_capacity(t_max.saturating_sub(1));
    for t in 1..t_max {
        let mask = match_mask(data, &d.prefix(t));
        nu.push(
            (0..data.n_units())
                .filter(|&i| mask[i])
                .map(|i| (i, coef_path.fitted[t][i] - coef_path.fitted[t - 1][i]))
                .collect(),
        );
    }
    ResidualSet { eps, nu }
}

/// V̂_T = n Σ γ_{i,T}² ε̂_i² + Σ_{t<T} n Σ γ_{i,t}² ν̂_{i,t}². The
/// homoskedastic variant replaces each squared residual by its
/// weight-averaged mean within the period.
pub fn variance_estimate(
    gamma: &[Vec<f64>],
    residuals: &ResidualSet,
    kind: VarianceKind,
) -> f64 {
    let t_max = gamma.len();
    let n = gamma[0].len() as f64;
    let term = |g: &[f64], res: &[(usize, f64)]| -> f64 {
        match kind {
            VarianceKind::Heteroskedastic => {
                n * res.iter().map(|&(i, r)| g[i] * g[i] * r * r).sum::<f64>()
            }
            VarianceKind::Homoskedastic => {
                let wsum: f64 = res.iter().map(|&(i, _)| g[i]).sum();
                if wsum <= 0.0 {
                    return 0.0;
                }
                let s2: f64 = res.iter().map(|&(i, r)| g[i] * r * r).sum::<f64>() / wsum;
                n * res.iter().map(|&(i, _)| g[i] * g[i]).sum::<f64>() * s2
            }
        }
    };
    let mut v = term(&gamma[t_max - 1], &residuals.eps);
    for t in 1..t_max {
        v += term(&gamma[t - 1], &residuals.nu[t - 1]);
    }
    v
}

/// Confidence interval: half-width q·√(v̂/n) with q = √(χ²_df(α)) in
/// chi-squared mode and q = Φ⁻¹(1 − α/2) in Gaussian mode.
pub fn confidence_interval(
    mu_hat: f64,
    v_hat: f64,
    n: usize,
    df: usize,
    alpha: f64,
    mode: QuantileMode,
) -> (f64, f64) {
    let q = match mode {
        QuantileMode::ChiSquared => chi_quantile(df, alpha).sqrt(),
        QuantileMode::Gaussian => normal_quantile(1.0 - alpha / 2.0),
    };
    let half = q * (v_hat.max(0.0) / n as f64).sqrt();
    (mu_hat - half, mu_hat + half)
}

/// Pipeline configuration for one estimate.
#[derive(Debug, Clone)]
pub struct DcbConfig {
    pub path_mode: PathMode,
    pub lasso: LassoConfig,
    pub grid: GridConfig,
    pub history: HistoryOpts,
    pub alpha: f64,
    pub mode: QuantileMode,
    pub variance: VarianceKind,
    /// Base constraint configuration; defaults are derived from (n, p_t)
    /// when unset.
    pub balance: Option<BalanceConfig>,
    /// Skip the tuning search and use the base configuration as-is.
    pub tune: bool,
}

impl Default for DcbConfig {
    fn default() -> Self {
        Self {
            path_mode: PathMode::Linear,
            lasso: LassoConfig::default(),
            grid: GridConfig::default(),
            history: HistoryOpts::default(),
            alpha: 0.05,
            mode: QuantileMode::ChiSquared,
            variance: VarianceKind::Heteroskedastic,
            balance: None,
            tune: true,
        }
    }
}

/// Everything produced for one target history.
#[derive(Debug, Clone)]
pub struct DcbOutput {
    pub report: EstimateReport,
    pub weights: BalanceWeights,
    pub coef_path: CoefficientPath,
    /// Tuned multipliers when tuning ran.
    pub multipliers: Option<Vec<(f64, f64)>>,
    pub config_used: BalanceConfig,
}

/// Shared back end: assembles a report from any weight sequence and fitted
/// coefficient path (the balancing and AIPW estimators differ only in the
/// weights they feed here).
pub fn assemble_estimate(
    data: &PanelDataset,
    d: &TreatmentHistory,
    gamma: &[Vec<f64>],
    coef_path: &CoefficientPath,
    stratum_sizes: Vec<usize>,
    alpha: f64,
    mode: QuantileMode,
    variance: VarianceKind,
    warnings: Vec<String>,
) -> EstimateReport {
    let n = data.n_units();
    let t_max = d.len();
    let y_end = data.endline_outcomes();
    let mu_hat = point_estimate(&y_end, gamma, &coef_path.fitted);
    let residuals = residual_set(data, d, coef_path);
    let v_het = variance_estimate(gamma, &residuals, VarianceKind::Heteroskedastic);
    let v_hom = variance_estimate(gamma, &residuals, VarianceKind::Homoskedastic);
    let v_hat = match variance {
        VarianceKind::Heteroskedastic => v_het,
        VarianceKind::Homoskedastic => v_hom,
    };
    let ci_chi = confidence_interval(mu_hat, v_hat, n, t_max, alpha, QuantileMode::ChiSquared);
    let ci_gauss = confidence_interval(mu_hat, v_hat, n, t_max, alpha, QuantileMode::Gaussian);
    let ci = match mode {
        QuantileMode::ChiSquared => ci_chi,
        QuantileMode::Gaussian => ci_gauss,
    };

    let mut residual_summary = Vec::new();
    let msq = |res: &[(usize, f64)]| -> (f64, usize) {
        if res.is_empty() {
            (0.0, 0)
        } else {
            (
                res.iter().map(|&(_, r)| r * r).sum::<f64>() / res.len() as f64,
                res.len(),
            )
        }
    };
    let (m, c) = msq(&residuals.eps);
    residual_summary.push(ResidualMoment {
        period: t_max,
        kind: "eps".into(),
        mean_sq: m,
        count: c,
    });
    for t in 1..t_max {
        let (m, c) = msq(&residuals.nu[t - 1]);
        residual_summary.push(ResidualMoment {
            period: t,
            kind: "nu".into(),
            mean_sq: m,
            count: c,
        });
    }

    let diagnostics = WeightDiagnostics {
        max_weight: gamma
            .iter()
            .map(|g| g.iter().cloned().fold(0.0, f64::max))
            .collect(),
        effective_sample_size: gamma
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
    };

    EstimateReport {
        mu_hat,
        v_hat,
        ci,
        alpha,
        mode,
        variance,
        df: t_max,
        n_units: n,
        t_periods: t_max,
        v_hat_homoskedastic: v_hom,
        ci_chi_squared: ci_chi,
        ci_gaussian: ci_gauss,
        residual_summary,
        diagnostics,
        warnings,
    }
}

/// Dynamic covariate balancing estimate of μ(d): coefficient recursion,
/// constraint tuning, weight solving, and assembly.
pub fn dcb_estimate(data: &PanelDataset, d: &TreatmentHistory, cfg: &DcbConfig) -> Result<DcbOutput> {
    if d.len() != data.n_periods() {
        return Err(DcbError::InvalidArgument(format!(
            "target history length {} != panel periods {}",
            d.len(),
            data.n_periods()
        )));
    }
    let coef_path = fit_coefficient_path(data, d, cfg.path_mode, &cfg.lasso, cfg.history)?;
    dcb_estimate_with_path(data, d, coef_path, cfg)
}

/// Balancing estimate from an already-fitted coefficient path (shared
/// across estimators in the experiment runner).
pub fn dcb_estimate_with_path(
    data: &PanelDataset,
    d: &TreatmentHistory,
    coef_path: CoefficientPath,
    cfg: &DcbConfig,
) -> Result<DcbOutput> {
    let widths = BalanceConfig::history_widths(data, d.len(), cfg.history)?;
    let base = match &cfg.balance {
        Some(b) => b.clone(),
        None => BalanceConfig::default_for(data.n_units(), &widths),
    };

    let (weights, multipliers, config_used) = if cfg.tune {
        let TunedBalance {
            config,
            weights,
            multipliers,
        } = tune_constraints(data, d, &base, &coef_path, &cfg.grid, cfg.history)?;
        (weights, Some(multipliers), config)
    } else {
        let weights = solve_weight_sequence(data, d, &base, cfg.history)?;
        (weights, None, base)
    };

    let report = assemble_estimate(
        data,
        d,
        &weights.gamma,
        &coef_path,
        weights.stratum_sizes.clone(),
        cfg.alpha,
        cfg.mode,
        cfg.variance,
        Vec::new(),
    );
    Ok(DcbOutput {
        report,
        weights,
        coef_path,
        multipliers,
        config_used,
    })
}

/// ATE output: the contrast report plus both level estimates.
#[derive(Debug, Clone)]
pub struct AteOutput {
    pub report: EstimateReport,
    pub level_d: DcbOutput,
    pub level_d_alt: DcbOutput,
}

/// Contrast μ̂(d) − μ̂(d′) with variance V̂(d) + V̂(d′) and 2T degrees of
/// freedom in chi-squared mode. Joint normality formally needs d₁ ≠ d′₁;
/// violations are surfaced as a warning rather than an error.
pub fn ate_estimate(
    data: &PanelDataset,
    d: &TreatmentHistory,
    d_alt: &TreatmentHistory,
    cfg: &DcbConfig,
) -> Result<AteOutput> {
    if d == d_alt {
        return Err(DcbError::InvalidArgument(
            "contrast requires two distinct treatment histories".into(),
        ));
    }
    let mut warnings = Vec::new();
    if d.bits()[0] == d_alt.bits()[0] {
        warnings.push(
            "histories share the first-period assignment; the joint-normality \
             condition behind the contrast interval is not guaranteed"
                .to_string(),
        );
    }
    let level_d = dcb_estimate(data, d, cfg)?;
    let level_d_alt = dcb_estimate(data, d_alt, cfg)?;
    let report = contrast_report(
        data,
        &level_d.report,
        &level_d_alt.report,
        cfg.alpha,
        cfg.mode,
        cfg.variance,
        warnings,
    );
    Ok(AteOutput {
        report,
        level_d,
        level_d_alt,
    })
}

/// Combines two level reports into a contrast report (shared by the DCB and
/// AIPW front ends).
pub fn contrast_report(
    data: &PanelDataset,
    a: &EstimateReport,
    b: &EstimateReport,
    alpha: f64,
    mode: QuantileMode,
    variance: VarianceKind,
    warnings: Vec<String>,
) -> EstimateReport {
    let n = data.n_units();
    let t_max = a.t_periods;
    let mu = a.mu_hat - b.mu_hat;
    let v = a.v_hat + b.v_hat;
    let v_hom = a.v_hat_homoskedastic + b.v_hat_homoskedastic;
    let df = 2 * t_max;
    let ci_chi = confidence_interval(mu, v, n, df, alpha, QuantileMode::ChiSquared);
    let ci_gauss = confidence_interval(mu, v, n, df, alpha, QuantileMode::Gaussian);
    let ci = match mode {
        QuantileMode::ChiSquared => ci_chi,
        QuantileMode::Gaussian => ci_gauss,
    };
    let mut residual_summary = a.residual_summary.clone();
    residual_summary.extend(b.residual_summary.iter().cloned());
    EstimateReport {
        mu_hat: mu,
        v_hat: v,
        ci,
        alpha,
        mode,
        variance,
        df,
        n_units: n,
        t_periods: t_max,
        v_hat_homoskedastic: v_hom,
        ci_chi_squared: ci_chi,
        ci_gaussian: ci_gauss,
        residual_summary,
        diagnostics: WeightDiagnostics {
            max_weight: a
                .diagnostics
                .max_weight
                .iter()
                .zip(&b.diagnostics.max_weight)
                .map(|(x, y)| x.max(*y))
                .collect(),
            effective_sample_size: a
                .diagnostics
                .effective_sample_size
                .iter()
                .zip(&b.diagnostics.effective_sample_size)
                .map(|(x, y)| x.min(*y))
                .collect(),
            stratum_sizes: a
                .diagnostics
                .stratum_sizes
                .iter()
                .zip(&b.diagnostics.stratum_sizes)
                .map(|(x, y)| x.min(y)).cloned()
                .collect(),
        },
        warnings,
    }
}
