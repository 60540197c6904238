//! Simulation designs and the Monte Carlo experiment runner.
//!
//! Covariates follow an AR(1) panel; treatments come from a logistic model
//! in accumulated covariate indices, centered lagged treatments, and a
//! private normal shock; outcomes accumulate covariate effects, lagged
//! outcomes, and the per-period treatment effect. The oracle bundle carries
//! the exact per-unit conditional treatment probabilities (with the private
//! shock integrated out) and a common-noise potential-outcome generator, so
//! each replicate knows its true estimand exactly.

use ndarray::{Array2, Array3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{DcbError, Result};
use crate::estimator::{ate_estimate, confidence_interval, contrast_report, dcb_estimate_with_path,
    DcbConfig, QuantileMode};
use crate::exec::map_indexed;
use crate::competitors::{aipw_estimate, estimate_propensity_logistic, ipw_estimate,
    naive_lasso_contrast, sequential_estimate, PropensityModel};
use crate::logistic::sigmoid;
use crate::panel::{PanelDataset, TreatmentHistory};
use crate::path::fit_coefficient_path;

/// Outcome-coefficient profile; every design is normalized to unit L2 norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaDesign {
    /// β_j ∝ 1{j ≤ 10}
    Sparse,
    /// β_j ∝ 1/j²
    Moderate,
    /// β_j ∝ 1/j
    Harmonic,
}

impl BetaDesign {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sparse" => Ok(Self::Sparse),
            "moderate" => Ok(Self::Moderate),
            "harmonic" => Ok(Self::Harmonic),
            other => Err(DcbError::InvalidArgument(format!(
                "unknown beta design `{other}` (expected sparse|moderate|harmonic)"
            ))),
        }
    }
}

/// Full description of one simulated design.
#[derive(Debug, Clone, Serialize)]
pub struct SimConfig {
    pub n: usize,
    pub t_periods: usize,
    /// dim(β) = dim(φ) = covariate dimension.
    pub p: usize,
    /// Confounding strength of covariates in the assignment model.
    pub eta: f64,
    /// Lagged-treatment coefficients in the assignment model.
    pub delta1: f64,
    pub delta2: f64,
    pub beta_design: BetaDesign,
    /// Per-period treatment effect.
    pub tau: f64,
    /// Carryover coefficients: `lambda_12` links each outcome to its
    /// immediate lag, `lambda_23` links the end-line outcome to the
    /// first-period outcome when T = 3 (`lambda_13` multiplies Y_0 = 0 and
    /// is kept for completeness).
    pub lambda_12: f64,
    pub lambda_13: f64,
    pub lambda_23: f64,
    /// Softplus (non-linear) outcome model instead of the linear one.
    pub misspecified: bool,
    /// Scale of the outcome noise (0 gives the noiseless variant).
    pub outcome_noise: f64,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(n: usize, t_periods: usize, p: usize, eta: f64, design: BetaDesign, seed: u64) -> Self {
        Self {
            n,
            t_periods,
            p,
            eta,
            delta1: 0.5,
            delta2: 0.25,
            beta_design: design,
            tau: 1.0,
            lambda_12: 1.0,
            lambda_13: 0.5,
            lambda_23: 0.5,
            misspecified: false,
            outcome_noise: 1.0,
            seed,
        }
    }

    /// Desk-scale profile: runs in minutes on a laptop core.
    pub fn desk(t_periods: usize, eta: f64, design: BetaDesign, seed: u64) -> Self {
        Self::new(200, t_periods, 50, eta, design, seed)
    }

    /// Full profile matching the reported experiments.
    pub fn full(t_periods: usize, eta: f64, design: BetaDesign, seed: u64) -> Self {
        Self::new(400, t_periods, 100, eta, design, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(DcbError::InvalidArgument("need n >= 2".into()));
        }
        if !(1..=3).contains(&self.t_periods) {
            return Err(DcbError::InvalidArgument(
                "simulated panels support 1..=3 periods".into(),
            ));
        }
        if self.p < 1 || self.eta < 0.0 {
            return Err(DcbError::InvalidArgument("need p >= 1 and eta >= 0".into()));
        }
        Ok(())
    }

    /// Outcome coefficients, normalized to ‖β‖₂ = 1.
    pub fn beta(&self) -> Vec<f64> {
        let mut b: Vec<f64> = (1..=self.p)
            .map(|j| match self.beta_design {
                BetaDesign::Sparse => {
                    if j <= 10 {
                        1.0
                    } else {
                        0.0
                    }
                }
                BetaDesign::Moderate => 1.0 / (j * j) as f64,
                BetaDesign::Harmonic => 1.0 / j as f64,
            })
            .collect();
        let norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        b.iter_mut().for_each(|v| *v /= norm);
        b
    }

    /// Assignment-model coefficients φ ∝ 1/j, ‖φ‖₂ = 1.
    pub fn phi(&self) -> Vec<f64> {
        let mut f: Vec<f64> = (1..=self.p).map(|j| 1.0 / j as f64).collect();
        let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        f.iter_mut().for_each(|v| *v /= norm);
        f
    }

    fn lag_coefficient(&self, s: usize, t: usize) -> f64 {
        // Coefficient on Y_s in the period-t equation. The immediate lag
        // always carries lambda_12 so that longer horizons nest the
        // two-period lag structure; Y_0 = 0 makes lambda_13 inert.
        if s + 1 == t {
            self.lambda_12
        } else if s + 2 == t {
            self.lambda_23
        } else {
            0.0
        }
    }
}

/// E[sigmoid(−a − Z)] for Z ~ N(0,1), by composite Simpson on [−8, 8].
pub fn logistic_normal_mean(a: f64) -> f64 {
    const M: usize = 160;
    const LO: f64 = -8.0;
    const HI: f64 = 8.0;
    let h = (HI - LO) / M as f64;
    let f = |z: f64| sigmoid(-a - z) * (-0.5 * z * z).exp();
    let mut acc = f(LO) + f(HI);
    for k in 1..M {
        let z = LO + h * k as f64;
        acc += f(z) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0 / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact per-replicate knowledge: the assignment-model index, shared
/// outcome noise, and the potential-outcome recursion.
#[derive(Debug, Clone)]
pub struct OracleBundle {
    /// theta_cov[t-1][i] = η Σ_{s≤t} X_{i,s} φ, the covariate part of the
    /// assignment index.
    theta_cov: Vec<Vec<f64>>,
    /// Realized per-period treatment shares used for centering.
    d_bar: Vec<f64>,
    /// Outcome noise draws shared across potential-outcome arms.
    eps: Vec<Vec<f64>>,
    beta: Vec<f64>,
    cfg: SimConfig,
}

impl OracleBundle {
    /// P(D_t = d_t | D_{1:t-1} = d_{1:t-1}, covariates) for every unit and
    /// period, with the private logistic shock integrated out. For units on
    /// the target path this is the realized conditional propensity; off
    /// path it is the path-conditioned counterfactual (those units carry
    /// zero weight anywhere it is used).
    pub fn path_prob_treat(&self, d: &TreatmentHistory) -> Vec<Vec<f64>> {
        let t_max = d.len().min(self.cfg.t_periods);
        let n = self.theta_cov[0].len();
        let mut out = Vec::with_capacity(t_max);
        for t in 1..=t_max {
            let mut shift = 0.0;
            for s in 1..t {
                let delta_s = match s {
                    1 => self.cfg.delta1,
                    2 => self.cfg.delta2,
                    _ => 0.0,
                };
                shift += delta_s * (f64::from(d.bits()[s - 1]) - self.d_bar[s - 1]);
            }
            out.push(
                (0..n)
                    .map(|i| logistic_normal_mean(self.theta_cov[t - 1][i] + shift))
                    .collect(),
            );
        }
        out
    }

    /// Potential outcomes Y_{i,t}(d) for all units and periods under common
    /// noise. Covariates are exogenous, so the realized panel's covariates
    /// are the potential ones.
    pub fn potential_outcomes(&self, data: &PanelDataset, d: &TreatmentHistory) -> Vec<Vec<f64>> {
        let n = data.n_units();
        let t_max = self.cfg.t_periods;
        let mut out = vec![vec![0.0; t_max]; n];
        for i in 0..n {
            for t in 1..=t_max {
                let mut v = 0.0;
                for s in 1..=t {
                    let xb: f64 = (0..self.cfg.p)
                        .map(|j| data.x(i, s, j) * self.beta[j])
                        .sum();
                    v += if self.cfg.misspecified {
                        softplus_term(xb)
                    } else {
                        xb
                    };
                    if s <= d.len() {
                        v += self.cfg.tau * f64::from(d.bits()[s - 1]);
                    }
                }
                for s in 1..t {
                    let ys = out[i][s - 1];
                    v += if self.cfg.misspecified {
                        softplus_term(ys)
                    } else {
                        self.cfg.lag_coefficient(s, t) * ys
                    };
                }
                v += self.cfg.outcome_noise * self.eps[i][t - 1];
                out[i][t - 1] = v;
            }
        }
        out
    }

    /// Mean end-line potential-outcome difference under common noise; for
    /// the linear model this is exact and constant across noise draws.
    pub fn true_ate(
        &self,
        data: &PanelDataset,
        d: &TreatmentHistory,
        d_alt: &TreatmentHistory,
    ) -> f64 {
        let t_max = self.cfg.t_periods;
        let a = self.potential_outcomes(data, d);
        let b = self.potential_outcomes(data, d_alt);
        let n = data.n_units() as f64;
        (0..data.n_units())
            .map(|i| a[i][t_max - 1] - b[i][t_max - 1])
            .sum::<f64>()
            / n
    }

    /// (1/n) Σ_i E[Y_T(d) | X_{i,1}]. Closed form for the linear outcome
    /// model; under misspecification this falls back to the common-noise
    /// sample mean of the potential outcomes.
    pub fn conditional_mean(&self, data: &PanelDataset, d: &TreatmentHistory) -> f64 {
        let t_max = self.cfg.t_periods;
        if self.cfg.misspecified {
            let po = self.potential_outcomes(data, d);
            return (0..data.n_units())
                .map(|i| po[i][t_max - 1])
                .sum::<f64>()
                / data.n_units() as f64;
        }
        let n = data.n_units();
        let mut acc = 0.0;
        for i in 0..n {
            let xb: f64 = (0..self.cfg.p)
                .map(|j| data.x(i, 1, j) * self.beta[j])
                .sum();
            let mut m_y = vec![0.0; t_max + 1];
            for t in 1..=t_max {
                let mut v = 0.0;
                for s in 1..=t {
                    v += 0.5f64.powi(s as i32 - 1) * xb;
                    v += self.cfg.tau * f64::from(d.bits()[s - 1]);
                }
                for s in 1..t {
                    v += self.cfg.lag_coefficient(s, t) * m_y[s];
                }
                m_y[t] = v;
            }
            acc += m_y[t_max];
        }
        acc / n as f64
    }

    /// Π_t P(D_t = 1 | treated so far) per unit: the joint propensity of
    /// the all-ones path.
    pub fn joint_treatment_propensity(&self) -> Vec<f64> {
        let ones = TreatmentHistory::constant(1, self.cfg.t_periods).unwrap();
        let probs = self.path_prob_treat(&ones);
        let n = self.theta_cov[0].len();
        (0..n).map(|i| probs.iter().map(|p| p[i]).product()).collect()
    }
}

fn softplus_term(v: f64) -> f64 {
    // log(1 + exp(-2 - 2v)), evaluated stably.
    let z = -2.0 - 2.0 * v;
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

/// Draws one panel plus its oracle bundle. The RNG stream is derived from
/// (cfg.seed, replicate), so datasets are identical across runs and worker
/// counts.
pub fn generate_dataset(cfg: &SimConfig, replicate: u64) -> Result<(PanelDataset, OracleBundle)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(replicate.wrapping_add(1));
    let n = cfg.n;
    let t_max = cfg.t_periods;
    let p = cfg.p;
    let beta = cfg.beta();
    let phi = cfg.phi();

    let mut x = Array3::<f64>::zeros((n, t_max, p));
    let mut d = Array2::<u8>::zeros((n, t_max));
    let mut y = Array2::<f64>::zeros((n, t_max));
    let mut eps = vec![vec![0.0; t_max]; n];
    let mut theta_cov = vec![vec![0.0; n]; t_max];
    // Accumulated covariate index Σ_{s≤t} X_{i,s} φ.
    let mut phi_index = vec![0.0; n];
    let mut d_bar = vec![0.0; t_max];

    let ar_noise_sd = 0.75f64.sqrt();
    for t in 0..t_max {
        // Covariates: AR(1) correlation across coordinates at t = 0, AR(1)
        // persistence across periods after that.
        for i in 0..n {
            if t == 0 {
                let mut prev = 0.0;
                for j in 0..p {
                    let z: f64 = rng.sample(rand_distr::StandardNormal);
                    let v = if j == 0 { z } else { 0.5 * prev + ar_noise_sd * z };
                    x[(i, t, j)] = v;
                    prev = v;
                }
            } else {
                for j in 0..p {
                    let z: f64 = rng.sample(rand_distr::StandardNormal);
                    x[(i, t, j)] = 0.5 * x[(i, t - 1, j)] + z;
                }
            }
            phi_index[i] += (0..p).map(|j| x[(i, t, j)] * phi[j]).sum::<f64>();
        }

        // Assignments: theta = eta·index + Σ_s δ_s (D_s − D̄_s) + ξ.
        for i in 0..n {
            theta_cov[t][i] = cfg.eta * phi_index[i];
            let mut theta_bar = theta_cov[t][i];
            for s in 0..t {
                let delta_s = match s {
                    0 => cfg.delta1,
                    1 => cfg.delta2,
                    _ => 0.0,
                };
                theta_bar += delta_s * (f64::from(d[(i, s)]) - d_bar[s]);
            }
            let xi: f64 = rng.sample(rand_distr::StandardNormal);
            let prob = sigmoid(-(theta_bar + xi));
            d[(i, t)] = u8::from(rng.gen_bool(prob));
        }
        d_bar[t] = (0..n).map(|i| f64::from(d[(i, t)])).sum::<f64>() / n as f64;

        // Outcomes under the realized assignments.
        for i in 0..n {
            eps[i][t] = rng.sample(rand_distr::StandardNormal);
            let mut v = 0.0;
            for s in 0..=t {
                let xb: f64 = (0..p).map(|j| x[(i, s, j)] * beta[j]).sum();
                v += if cfg.misspecified { softplus_term(xb) } else { xb };
                v += cfg.tau * f64::from(d[(i, s)]);
            }
            for s in 1..=t {
                let ys = y[(i, s - 1)];
                v += if cfg.misspecified {
                    softplus_term(ys)
                } else {
                    cfg.lag_coefficient(s, t + 1) * ys
                };
            }
            v += cfg.outcome_noise * eps[i][t];
            y[(i, t)] = v;
        }
    }

    let ids = (0..n).map(|i| format!("u{i}")).collect();
    let panel = PanelDataset::new(ids, x, d, y)?;
    let oracle = OracleBundle {
        theta_cov,
        d_bar,
        eps,
        beta,
        cfg: cfg.clone(),
    };
    Ok((panel, oracle))
}

/// Five-number summary of the joint treatment-path propensity.
#[derive(Debug, Clone, Serialize)]
pub struct PropensitySummary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    // Linear interpolation between order statistics.
    let n = v.len();
    if n == 1 {
        return v[0];
    }
    let h = q * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Distribution of Π_t P(D_t = 1 | ·) across units, with each statistic
/// averaged over the given seeds.
pub fn propensity_summary(cfg: &SimConfig, seeds: &[u64]) -> Result<PropensitySummary> {
    let mut acc = [0.0f64; 5];
    for &s in seeds {
        let mut c = cfg.clone();
        c.seed = s;
        let (_, oracle) = generate_dataset(&c, 0)?;
        let mut joint = oracle.joint_treatment_propensity();
        joint.sort_by(|a, b| a.partial_cmp(b).unwrap());
        acc[0] += joint[0];
        acc[1] += quantile_sorted(&joint, 0.25);
        acc[2] += quantile_sorted(&joint, 0.5);
        acc[3] += quantile_sorted(&joint, 0.75);
        acc[4] += *joint.last().unwrap();
    }
    let k = seeds.len().max(1) as f64;
    Ok(PropensitySummary {
        min: acc[0] / k,
        q1: acc[1] / k,
        median: acc[2] / k,
        q3: acc[3] / k,
        max: acc[4] / k,
    })
}

/// Estimators the experiment runner knows how to drive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Dcb,
    AipwOracle,
    AipwLogistic,
    AipwPenLogistic,
    IpwOracle,
    IpwPenLogistic,
    NaiveLasso,
    SeqEst,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Dcb,
        Method::AipwOracle,
        Method::AipwLogistic,
        Method::AipwPenLogistic,
        Method::IpwOracle,
        Method::IpwPenLogistic,
        Method::NaiveLasso,
        Method::SeqEst,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Dcb => "dcb",
            Method::AipwOracle => "aipw_oracle",
            Method::AipwLogistic => "aipw_logistic",
            Method::AipwPenLogistic => "aipw_pen_logistic",
            Method::IpwOracle => "ipw_oracle",
            Method::IpwPenLogistic => "ipw_pen_logistic",
            Method::NaiveLasso => "naive_lasso",
            Method::SeqEst => "seq_est",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .find(|m| m.name() == s)
            .copied()
            .ok_or_else(|| {
                let valid: Vec<&str> = Self::ALL.iter().map(|m| m.name()).collect();
                DcbError::InvalidArgument(format!(
                    "unknown method `{s}`; valid methods: {}",
                    valid.join(", ")
                ))
            })
    }

    fn needs_coef_paths(&self) -> bool {
        matches!(
            self,
            Method::Dcb | Method::AipwOracle | Method::AipwLogistic | Method::AipwPenLogistic
        )
    }
}

/// One method's outcome on one replicate.
#[derive(Debug, Clone, Serialize)]
pub struct MethodOutcome {
    pub method: Method,
    pub estimate: Option<f64>,
    pub ci_chi: Option<(f64, f64)>,
    pub ci_gauss: Option<(f64, f64)>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub truth: f64,
    pub outcomes: Vec<MethodOutcome>,
}

/// Aggregate over replicates for one method.
#[derive(Debug, Clone, Serialize)]
pub struct MethodSummary {
    pub method: Method,
    pub mse: f64,
    pub bias: f64,
    pub coverage_chi: Option<f64>,
    pub coverage_gauss: Option<f64>,
    pub mean_ci_width: Option<f64>,
    pub replicates: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentResult {
    pub methods: Vec<MethodSummary>,
    pub records: Vec<ReplicateRecord>,
}

fn run_replicate(
    cfg: &SimConfig,
    rep: usize,
    methods: &[Method],
    dcb_cfg: &DcbConfig,
) -> ReplicateRecord {
    let t_max = cfg.t_periods;
    let ones = TreatmentHistory::constant(1, t_max).unwrap();
    let zeros = TreatmentHistory::constant(0, t_max).unwrap();

    let fail_all = |msg: String| -> ReplicateRecord {
        ReplicateRecord {
            replicate: rep,
            truth: f64::NAN,
            outcomes: methods
                .iter()
                .map(|&m| MethodOutcome {
                    method: m,
                    estimate: None,
                    ci_chi: None,
                    ci_gauss: None,
                    error: Some(msg.clone()),
                })
                .collect(),
        }
    };

    let (data, oracle) = match generate_dataset(cfg, rep as u64) {
        Ok(v) => v,
        Err(e) => return fail_all(e.to_string()),
    };
    let truth = oracle.true_ate(&data, &ones, &zeros);

    let mut est_cfg = dcb_cfg.clone();
    est_cfg.lasso.cv_seed = cfg.seed.wrapping_add(rep as u64);

    // Shared coefficient paths for the doubly-robust estimators.
    let paths = if methods.iter().any(Method::needs_coef_paths) {
        let a = fit_coefficient_path(&data, &ones, est_cfg.path_mode, &est_cfg.lasso, est_cfg.history);
        let b = fit_coefficient_path(&data, &zeros, est_cfg.path_mode, &est_cfg.lasso, est_cfg.history);
        match (a, b) {
            (Ok(a), Ok(b)) => Some((a, b)),
            (Err(e), _) | (_, Err(e)) => {
                let msg = format!("coefficient path: {e}");
                return ReplicateRecord {
                    replicate: rep,
                    truth,
                    outcomes: methods
                        .iter()
                        .map(|&m| MethodOutcome {
                            method: m,
                            estimate: if m.needs_coef_paths() { None } else { Some(f64::NAN) },
                            ci_chi: None,
                            ci_gauss: None,
                            error: Some(msg.clone()),
                        })
                        .collect(),
                };
            }
        }
    } else {
        None
    };

    // Propensity fits shared across methods; the oracle model is evaluated
    // along each arm's path.
    let known_pm_ones = PropensityModel::known(oracle.path_prob_treat(&ones));
    let known_pm_zeros = PropensityModel::known(oracle.path_prob_treat(&zeros));
    let need_pen = methods
        .iter()
        .any(|m| matches!(m, Method::AipwPenLogistic | Method::IpwPenLogistic));
    let pen_pm = if need_pen {
        Some(estimate_propensity_logistic(
            &data,
            true,
            est_cfg.history,
            cfg.seed.wrapping_add(rep as u64),
        ))
    } else {
        None
    };
    let need_logit = methods.iter().any(|m| matches!(m, Method::AipwLogistic));
    let logit_pm = if need_logit {
        Some(estimate_propensity_logistic(
            &data,
            false,
            est_cfg.history,
            cfg.seed.wrapping_add(rep as u64),
        ))
    } else {
        None
    };

    let aipw_contrast = |pm_a: &PropensityModel,
                         pm_b: &PropensityModel|
     -> crate::error::Result<(f64, (f64, f64), (f64, f64))> {
        let (pa, pb) = paths.as_ref().unwrap();
        let a = aipw_estimate(&data, &ones, pm_a, pa, est_cfg.alpha, est_cfg.mode, est_cfg.variance)?;
        let b = aipw_estimate(&data, &zeros, pm_b, pb, est_cfg.alpha, est_cfg.mode, est_cfg.variance)?;
        let rep = contrast_report(&data, &a, &b, est_cfg.alpha, est_cfg.mode, est_cfg.variance, vec![]);
        Ok((rep.mu_hat, rep.ci_chi_squared, rep.ci_gaussian))
    };

    let outcomes: Vec<MethodOutcome> = methods
        .iter()
        .map(|&m| {
            let run = || -> crate::error::Result<(f64, Option<(f64, f64)>, Option<(f64, f64)>)> {
                match m {
                    Method::Dcb => {
                        let (pa, pb) = paths.as_ref().unwrap();
                        let a = dcb_estimate_with_path(&data, &ones, pa.clone(), &est_cfg)?;
                        let b = dcb_estimate_with_path(&data, &zeros, pb.clone(), &est_cfg)?;
                        let mut warnings = Vec::new();
                        if ones.bits()[0] == zeros.bits()[0] {
                            warnings.push("contrast shares first-period assignment".into());
                        }
                        let rep = contrast_report(
                            &data,
                            &a.report,
                            &b.report,
                            est_cfg.alpha,
                            est_cfg.mode,
                            est_cfg.variance,
                            warnings,
                        );
                        Ok((
                            rep.mu_hat,
                            Some(rep.ci_chi_squared),
                            Some(rep.ci_gaussian),
                        ))
                    }
                    Method::AipwOracle => {
                        let (mu, chi, gauss) = aipw_contrast(&known_pm_ones, &known_pm_zeros)?;
                        Ok((mu, Some(chi), Some(gauss)))
                    }
                    Method::AipwLogistic => {
                        let pm = logit_pm.as_ref().unwrap().as_ref().map_err(clone_err)?;
                        let (mu, chi, gauss) = aipw_contrast(pm, pm)?;
                        Ok((mu, Some(chi), Some(gauss)))
                    }
                    Method::AipwPenLogistic => {
                        let pm = pen_pm.as_ref().unwrap().as_ref().map_err(clone_err)?;
                        let (mu, chi, gauss) = aipw_contrast(pm, pm)?;
                        Ok((mu, Some(chi), Some(gauss)))
                    }
                    Method::IpwOracle => {
                        let a = ipw_estimate(&data, &ones, &known_pm_ones, est_cfg.alpha)?;
                        let b = ipw_estimate(&data, &zeros, &known_pm_zeros, est_cfg.alpha)?;
                        Ok((a.mu_hat - b.mu_hat, None, None))
                    }
                    Method::IpwPenLogistic => {
                        let pm = pen_pm.as_ref().unwrap().as_ref().map_err(clone_err)?;
                        let a = ipw_estimate(&data, &ones, pm, est_cfg.alpha)?;
                        let b = ipw_estimate(&data, &zeros, pm, est_cfg.alpha)?;
                        Ok((a.mu_hat - b.mu_hat, None, None))
                    }
                    Method::NaiveLasso => {
                        let c = naive_lasso_contrast(&data, &ones, &zeros, &est_cfg.lasso)?;
                        Ok((c, None, None))
                    }
                    Method::SeqEst => {
                        let a = sequential_estimate(&data, &ones, &est_cfg.lasso)?;
                        let b = sequential_estimate(&data, &zeros, &est_cfg.lasso)?;
                        Ok((a - b, None, None))
                    }
                }
            };
            match run() {
                Ok((est, chi, gauss)) => MethodOutcome {
                    method: m,
                    estimate: Some(est),
                    ci_chi: chi,
                    ci_gauss: gauss,
                    error: None,
                },
                Err(e) => MethodOutcome {
                    method: m,
                    estimate: None,
                    ci_chi: None,
                    ci_gauss: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();

    ReplicateRecord {
        replicate: rep,
        truth,
        outcomes,
    }
}

fn clone_err(e: &DcbError) -> DcbError {
    DcbError::NumericalFailure {
        what: e.to_string(),
    }
}

/// Runs the all-ones vs all-zeros contrast across replicates and
/// aggregates MSE, bias, coverage, and CI width per method. Replicates are
/// deterministic in (cfg.seed, replicate index) regardless of `workers`.
pub fn run_mse_experiment(
    cfg: &SimConfig,
    methods: &[Method],
    replicates: usize,
    workers: usize,
    dcb_cfg: &DcbConfig,
) -> Result<ExperimentResult> {
    if replicates < 2 {
        return Err(DcbError::InvalidArgument("need at least 2 replicates".into()));
    }
    cfg.validate()?;
    let records: Vec<ReplicateRecord> = map_indexed(replicates, workers, |rep| {
        run_replicate(cfg, rep, methods, dcb_cfg)
    });

    let mut methods_out = Vec::with_capacity(methods.len());
    for (k, &m) in methods.iter().enumerate() {
        let mut sq = 0.0;
        let mut bias = 0.0;
        let mut used = 0usize;
        let mut failures = 0usize;
        let mut cover_chi = 0usize;
        let mut cover_gauss = 0usize;
        let mut n_ci = 0usize;
        let mut width = 0.0;
        for r in &records {
            let o = &r.outcomes[k];
            match o.estimate {
                Some(est) if est.is_finite() && r.truth.is_finite() => {
                    let e = est - r.truth;
                    sq += e * e;
                    bias += e;
                    used += 1;
                    if let (Some(chi), Some(gauss)) = (o.ci_chi, o.ci_gauss) {
                        n_ci += 1;
                        if chi.0 <= r.truth && r.truth <= chi.1 {
                            cover_chi += 1;
                        }
                        if gauss.0 <= r.truth && r.truth <= gauss.1 {
                            cover_gauss += 1;
                        }
                        width += chi.1 - chi.0;
                    }
                }
                _ => failures += 1,
            }
        }
        let uf = used.max(1) as f64;
        methods_out.push(MethodSummary {
            method: m,
            mse: sq / uf,
            bias: bias / uf,
            coverage_chi: (n_ci > 0).then(|| cover_chi as f64 / n_ci as f64),
            coverage_gauss: (n_ci > 0).then(|| cover_gauss as f64 / n_ci as f64),
            mean_ci_width: (n_ci > 0).then(|| width / n_ci as f64),
            replicates: used,
            failures,
        });
    }
    Ok(ExperimentResult {
        methods: methods_out,
        records,
    })
}

/// Coverage target for the coverage experiment.
#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageTarget {
    /// μ(d) against the per-replicate conditional mean.
    Level(Vec<u8>),
    /// μ(d) − μ(d′) against the per-replicate true contrast.
    Contrast(Vec<u8>, Vec<u8>),
}

#[derive(Debug, Clone, Serialize)]
pub struct CoverageResult {
    pub coverage_chi_het: f64,
    pub coverage_chi_hom: f64,
    pub coverage_gauss_het: f64,
    pub coverage_gauss_hom: f64,
    pub mean_width_chi_het: f64,
    pub replicates: usize,
    pub failures: usize,
    pub records: Vec<CoverageRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoverageRecord {
    pub replicate: usize,
    pub truth: f64,
    pub estimate: Option<f64>,
    pub v_het: Option<f64>,
    pub v_hom: Option<f64>,
    pub error: Option<String>,
}

/// Coverage of the balancing estimator's intervals in all four
/// calibrations (chi-squared / Gaussian × heteroskedastic / homoskedastic).
pub fn run_coverage_experiment(
    cfg: &SimConfig,
    target: &CoverageTarget,
    replicates: usize,
    workers: usize,
    dcb_cfg: &DcbConfig,
) -> Result<CoverageResult> {
    if replicates < 2 {
        return Err(DcbError::InvalidArgument("need at least 2 replicates".into()));
    }
    cfg.validate()?;

    let records: Vec<CoverageRecord> = map_indexed(replicates, workers, |rep| {
        let run = || -> Result<(f64, f64, f64, f64)> {
            let (data, oracle) = generate_dataset(cfg, rep as u64)?;
            let mut est_cfg = dcb_cfg.clone();
            est_cfg.lasso.cv_seed = cfg.seed.wrapping_add(rep as u64);
            match target {
                CoverageTarget::Level(bits) => {
                    let d = TreatmentHistory::new(bits.clone())?;
                    let truth = oracle.conditional_mean(&data, &d);
                    let out = crate::estimator::dcb_estimate(&data, &d, &est_cfg)?;
                    Ok((
                        truth,
                        out.report.mu_hat,
                        out.report.v_hat,
                        out.report.v_hat_homoskedastic,
                    ))
                }
                CoverageTarget::Contrast(bits_a, bits_b) => {
                    let da = TreatmentHistory::new(bits_a.clone())?;
                    let db = TreatmentHistory::new(bits_b.clone())?;
                    let truth = oracle.conditional_mean(&data, &da)
                        - oracle.conditional_mean(&data, &db);
                    let out = ate_estimate(&data, &da, &db, &est_cfg)?;
                    Ok((
                        truth,
                        out.report.mu_hat,
                        out.report.v_hat,
                        out.report.v_hat_homoskedastic,
                    ))
                }
            }
        };
        match run() {
            Ok((truth, est, v_het, v_hom)) => CoverageRecord {
                replicate: rep,
                truth,
                estimate: Some(est),
                v_het: Some(v_het),
                v_hom: Some(v_hom),
                error: None,
            },
            Err(e) => CoverageRecord {
                replicate: rep,
                truth: f64::NAN,
                estimate: None,
                v_het: None,
                v_hom: None,
                error: Some(e.to_string()),
            },
        }
    });

    let df = match target {
        CoverageTarget::Level(bits) => bits.len(),
        CoverageTarget::Contrast(bits, _) => 2 * bits.len(),
    };
    let n = cfg.n;
    let alpha = dcb_cfg.alpha;
    let mut used = 0usize;
    let mut failures = 0usize;
    let mut c = [0usize; 4];
    let mut width = 0.0;
    for r in &records {
        match (r.estimate, r.v_het, r.v_hom) {
            (Some(est), Some(vhe), Some(vho)) if r.truth.is_finite() => {
                used += 1;
                let checks = [
                    (vhe, QuantileMode::ChiSquared),
                    (vho, QuantileMode::ChiSquared),
                    (vhe, QuantileMode::Gaussian),
                    (vho, QuantileMode::Gaussian),
                ];
                for (k, (v, mode)) in checks.iter().enumerate() {
                    let (lo, hi) = confidence_interval(est, *v, n, df, alpha, *mode);
                    if lo <= r.truth && r.truth <= hi {
                        c[k] += 1;
                    }
                    if k == 0 {
                        width += hi - lo;
                    }
                }
            }
            _ => failures += 1,
        }
    }
    let uf = used.max(1) as f64;
    Ok(CoverageResult {
        coverage_chi_het: c[0] as f64 / uf,
        coverage_chi_hom: c[1] as f64 / uf,
        coverage_gauss_het: c[2] as f64 / uf,
        coverage_gauss_hom: c[3] as f64 / uf,
        mean_width_chi_het: width / uf,
        replicates: used,
        failures,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_cfg() -> SimConfig {
        SimConfig::new(60, 2, 8, 0.1, BetaDesign::Sparse, 7)
    }

    #[test]
    fn beta_designs_are_unit_norm() {
        for design in [BetaDesign::Sparse, BetaDesign::Moderate, BetaDesign::Harmonic] {
            let cfg = SimConfig::new(10, 2, 37, 0.1, design, 0);
            let b = cfg.beta();
            let norm: f64 = b.iter().map(|v| v * v).sum();
            assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-12);
            let f = cfg.phi();
            let norm_phi: f64 = f.iter().map(|v| v * v).sum();
            assert_abs_diff_eq!(norm_phi, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn baseline_covariates_have_ar_correlation() {
        let mut cfg = SimConfig::new(4000, 1, 6, 0.0, BetaDesign::Sparse, 3);
        cfg.outcome_noise = 1.0;
        let (panel, _) = generate_dataset(&cfg, 0).unwrap();
        let n = panel.n_units();
        let col = |j: usize| -> Vec<f64> { (0..n).map(|i| panel.x(i, 1, j)).collect() };
        let corr = |a: &[f64], b: &[f64]| -> f64 {
            let nf = a.len() as f64;
            let ma = a.iter().sum::<f64>() / nf;
            let mb = b.iter().sum::<f64>() / nf;
            let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / nf;
            let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum::<f64>() / nf;
            let vb: f64 = b.iter().map(|x| (x - mb) * (x - mb)).sum::<f64>() / nf;
            cov / (va * vb).sqrt()
        };
        let c01 = corr(&col(0), &col(1));
        let c02 = corr(&col(0), &col(2));
        assert_abs_diff_eq!(c01, 0.5, epsilon = 0.05);
        assert_abs_diff_eq!(c02, 0.25, epsilon = 0.05);
    }

    #[test]
    fn no_covariate_confounding_gives_half_propensity() {
        let mut cfg = small_cfg();
        cfg.eta = 0.0;
        cfg.n = 500;
        let (panel, oracle) = generate_dataset(&cfg, 0).unwrap();
        // Period-1 integrated propensity is exactly 1/2 when theta has no
        // covariate term.
        let ones = TreatmentHistory::new(vec![1, 1]).unwrap();
        let probs = oracle.path_prob_treat(&ones);
        for i in 0..panel.n_units() {
            assert_abs_diff_eq!(probs[0][i], 0.5, epsilon = 1e-6);
        }
        let share = (0..panel.n_units())
            .map(|i| f64::from(panel.d(i, 1)))
            .sum::<f64>()
            / panel.n_units() as f64;
        assert!((share - 0.5).abs() < 0.08, "share = {share}");
    }

    #[test]
    fn degenerate_assignment_model_joint_is_half_power_t() {
        let mut cfg = small_cfg();
        cfg.eta = 0.0;
        cfg.delta1 = 0.0;
        cfg.delta2 = 0.0;
        let summary = propensity_summary(&cfg, &[1, 2]).unwrap();
        assert_abs_diff_eq!(summary.median, 0.25, epsilon = 1e-6);
        assert_abs_diff_eq!(summary.max, 0.25, epsilon = 1e-6);
    }

    #[test]
    fn true_ate_is_exact_for_linear_dgp() {
        let cfg = small_cfg();
        let (panel, oracle) = generate_dataset(&cfg, 3).unwrap();
        let ones = TreatmentHistory::new(vec![1, 1]).unwrap();
        let zeros = TreatmentHistory::new(vec![0, 0]).unwrap();
        // τ(1 + 1 + λ_12) = 3 with τ = 1.
        assert_abs_diff_eq!(oracle.true_ate(&panel, &ones, &zeros), 3.0, epsilon = 1e-10);

        let mut cfg3 = small_cfg();
        cfg3.t_periods = 3;
        let (p3, o3) = generate_dataset(&cfg3, 3).unwrap();
        let ones3 = TreatmentHistory::new(vec![1, 1, 1]).unwrap();
        let zeros3 = TreatmentHistory::new(vec![0, 0, 0]).unwrap();
        // Direct propagation through the lag structure: 6.5τ.
        assert_abs_diff_eq!(o3.true_ate(&p3, &ones3, &zeros3), 6.5, epsilon = 1e-10);
    }

    #[test]
    fn observed_outcomes_match_potential_at_realized_path() {
        let cfg = small_cfg();
        let (panel, oracle) = generate_dataset(&cfg, 1).unwrap();
        for i in 0..panel.n_units() {
            let d = TreatmentHistory::new(vec![panel.d(i, 1), panel.d(i, 2)]).unwrap();
            let po = oracle.potential_outcomes(&panel, &d);
            for t in 1..=2 {
                assert_abs_diff_eq!(po[i][t - 1], panel.y(i, t), epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn no_anticipation_in_potential_outcomes() {
        let cfg = small_cfg();
        let (panel, oracle) = generate_dataset(&cfg, 2).unwrap();
        let a = oracle.potential_outcomes(&panel, &TreatmentHistory::new(vec![1, 1]).unwrap());
        let b = oracle.potential_outcomes(&panel, &TreatmentHistory::new(vec![1, 0]).unwrap());
        for i in 0..panel.n_units() {
            // Changing d_2 leaves period-1 outcomes untouched.
            assert_eq!(a[i][0].to_bits(), b[i][0].to_bits());
        }
    }

    #[test]
    fn conditional_mean_matches_monte_carlo() {
        let mut cfg = small_cfg();
        cfg.n = 2000;
        let (panel, oracle) = generate_dataset(&cfg, 5).unwrap();
        let ones = TreatmentHistory::new(vec![1, 1]).unwrap();
        // The common-noise mean of potential outcomes estimates the same
        // conditional mean up to noise averaging.
        let closed = oracle.conditional_mean(&panel, &ones);
        let po = oracle.potential_outcomes(&panel, &ones);
        let mc: f64 =
            (0..panel.n_units()).map(|i| po[i][1]).sum::<f64>() / panel.n_units() as f64;
        assert_abs_diff_eq!(closed, mc, epsilon = 0.25);
    }

    #[test]
    fn datasets_reproducible_and_worker_independent() {
        let cfg = small_cfg();
        let (a, _) = generate_dataset(&cfg, 11).unwrap();
        let (b, _) = generate_dataset(&cfg, 11).unwrap();
        for i in 0..a.n_units() {
            for t in 1..=2 {
                assert_eq!(a.y(i, t).to_bits(), b.y(i, t).to_bits());
                assert_eq!(a.d(i, t), b.d(i, t));
            }
        }
        // Different replicate stream gives different data.
        let (c, _) = generate_dataset(&cfg, 12).unwrap();
        assert!(a.y(0, 1) != c.y(0, 1));
    }

    #[test]
    fn logistic_normal_mean_symmetry() {
        assert_abs_diff_eq!(logistic_normal_mean(0.0), 0.5, epsilon = 1e-9);
        let p = logistic_normal_mean(1.0);
        let q = logistic_normal_mean(-1.0);
        assert_abs_diff_eq!(p + q, 1.0, epsilon = 1e-9);
        assert!(p < 0.5);
    }
}
