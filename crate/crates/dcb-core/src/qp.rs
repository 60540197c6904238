//! Minimum-norm weight program: minimize Σγ² over the capped simplex
//! subject to box constraints on weighted column moments,
//!
//! ```text
//!     minimize   Σ_i γ_i²
//!     subject to |Σ_i γ_i h_{ij} − m_j| ≤ δ_j   for every column j,
//!                Σ_i γ_i = 1,  0 ≤ γ_i ≤ cap.
//! ```
//!
//! Solved by accelerated dual ascent: the balance constraints are dualized,
//! each inner minimization is a Euclidean projection onto the capped simplex
//! (bisection on the shift multiplier), and an active-set polish step
//! sharpens the solution once the working set settles. Infeasibility is a
//! recoverable signal: the solver returns the least-infeasible point with
//! its achieved gaps instead of failing.

use crate::error::{DcbError, Result};

/// Feasibility slack added to every constraint check to absorb
/// floating-point noise.
pub const FEAS_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct QpConfig {
    /// Relative KKT / complementarity tolerance at exit.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for QpConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 20_000,
        }
    }
}

/// One balance program over the active (masked) units.
#[derive(Debug)]
pub struct BalanceProgram {
    n: usize,
    p: usize,
    /// Row-major (i * p + j) design over active units.
    h_rows: Vec<f64>,
    /// Column-major (j * n + i) copy for moment evaluations.
    h_cols: Vec<f64>,
    target: Vec<f64>,
    delta: Vec<f64>,
    cap: f64,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    /// Weights over the active units (same order as the rows passed in).
    pub gamma: Vec<f64>,
    pub feasible: bool,
    /// Signed moment gaps Σγh − m per column.
    pub gaps: Vec<f64>,
    /// Σγ².
    pub objective: f64,
    pub iterations: usize,
}

/// Projects `v` onto `{γ : Σγ = 1, 0 ≤ γ ≤ cap}` in place. Requires
/// `n · cap ≥ 1`. Bisection on the shift multiplier, then an exact sum
/// correction spread over the strictly interior coordinates.
pub fn project_capped_simplex(v: &mut [f64], cap: f64) {
    let n = v.len();
    debug_assert!(n as f64 * cap >= 1.0 - 1e-12);
    let sum_at = |tau: f64, v: &[f64]| -> f64 {
        v.iter().map(|&vi| (vi - tau).clamp(0.0, cap)).sum()
    };
    let mut lo = v.iter().cloned().fold(f64::INFINITY, f64::min) - cap - 1.0;
    let mut hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if sum_at(mid, v) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 * (1.0 + hi.abs()) {
            break;
        }
    }
    let tau = 0.5 * (lo + hi);
    for vi in v.iter_mut() {
        *vi = (*vi - tau).clamp(0.0, cap);
    }
    // Exact sum repair over interior coordinates.
    let resid = 1.0 - v.iter().sum::<f64>();
    if resid != 0.0 {
        let interior: Vec<usize> = (0..n)
            .filter(|&i| v[i] > 1e-12 && v[i] < cap - 1e-12)
            .collect();
        if !interior.is_empty() {
            let share = resid / interior.len() as f64;
            for &i in &interior {
                v[i] = (v[i] + share).clamp(0.0, cap);
            }
        }
    }
}

impl BalanceProgram {
    /// `rows[i]` is the history vector of active unit i; `target` and
    /// `delta` are per-column. The cap is floored at 1/n so the uniform
    /// point is never excluded by rounding.
    pub fn new(rows: Vec<Vec<f64>>, target: Vec<f64>, delta: Vec<f64>, cap: f64) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(DcbError::Infeasible {
                period: 0,
                worst_gap: f64::INFINITY,
                bound: 0.0,
            });
        }
        let p = target.len();
        if delta.len() != p || rows.iter().any(|r| r.len() != p) {
            return Err(DcbError::InvalidArgument(
                "balance program dimensions disagree".into(),
            ));
        }
        if delta.iter().any(|&d| d <= 0.0) {
            return Err(DcbError::InvalidArgument("delta must be > 0".into()));
        }
        let cap = cap.max(1.0 / n as f64);
        let mut h_rows = Vec::with_capacity(n * p);
        for r in &rows {
            h_rows.extend_from_slice(r);
        }
        if h_rows.iter().any(|v| !v.is_finite()) || target.iter().any(|v| !v.is_finite()) {
            return Err(DcbError::NonFinite {
                what: "balance program".into(),
            });
        }
        let mut h_cols = vec![0.0; n * p];
        for i in 0..n {
            for j in 0..p {
                h_cols[j * n + i] = h_rows[i * p + j];
            }
        }
        Ok(Self {
            n,
            p,
            h_rows,
            h_cols,
            target,
            delta,
            cap,
        })
    }

    pub fn n_active(&self) -> usize {
        self.n
    }

    pub fn cap(&self) -> f64 {
        self.cap
    }

    /// Signed moment gaps Σ_i γ_i h_{ij} − m_j.
    pub fn gaps(&self, gamma: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.p];
        for j in 0..self.p {
            let col = &self.h_cols[j * self.n..(j + 1) * self.n];
            let mut acc = 0.0;
            for i in 0..self.n {
                acc += col[i] * gamma[i];
            }
            g[j] = acc - self.target[j];
        }
        g
    }

    /// Worst constraint violation (gap minus bound) of a point already on
    /// the capped simplex. Negative means strictly inside.
    pub fn violation(&self, gaps: &[f64]) -> f64 {
        gaps.iter()
            .zip(&self.delta)
            .map(|(g, d)| g.abs() - d)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// True when `gamma` satisfies every constraint within the shared
    /// feasibility slack.
    pub fn is_feasible(&self, gamma: &[f64]) -> bool {
        let sum: f64 = gamma.iter().sum();
        if (sum - 1.0).abs() > FEAS_TOL {
            return false;
        }
        if gamma.iter().any(|&g| g < -1e-10 || g > self.cap + 1e-10) {
            return false;
        }
        self.violation(&self.gaps(gamma)) <= FEAS_TOL
    }

    /// y ← H u (length n), accumulated over rows.
    fn h_times(&self, u: &[f64], out: &mut [f64]) {
        for i in 0..self.n {
            let row = &self.h_rows[i * self.p..(i + 1) * self.p];
            let mut acc = 0.0;
            for j in 0..self.p {
                acc += row[j] * u[j];
            }
            out[i] = acc;
        }
    }

    /// Largest singular value squared of H, by power iteration.
    fn spectral_norm_sq(&self) -> f64 {
        let mut v = vec![1.0 / (self.p as f64).sqrt(); self.p];
        let mut w = vec![0.0; self.n];
        let mut sigma2 = 0.0;
        for it in 0..40 {
            self.h_times(&v, &mut w);
            // v <- H^T w
            let mut norm2 = 0.0;
            for j in 0..self.p {
                let col = &self.h_cols[j * self.n..(j + 1) * self.n];
                let mut acc = 0.0;
                for i in 0..self.n {
                    acc += col[i] * w[i];
                }
                v[j] = acc;
                norm2 += acc * acc;
            }
            let norm = norm2.sqrt();
            if norm < 1e-300 {
                return 1.0;
            }
            for vj in v.iter_mut() {
                *vj /= norm;
            }
            let new_sigma2 = norm;
            if it > 5 && (new_sigma2 - sigma2).abs() <= 1e-6 * new_sigma2 {
                return new_sigma2;
            }
            sigma2 = new_sigma2;
        }
        sigma2.max(1e-12)
    }

    /// Accelerated projected gradient on the squared-hinge infeasibility
    /// Σ_j ((|gap_j| − δ_j)⁺)², starting from `start`. Exits as soon as all
    /// gaps are inside their bounds. Returns (point, worst violation).
    fn feasibility_descent(&self, start: &[f64], sigma2: f64, max_iter: usize) -> (Vec<f64>, f64) {
        let step = 1.0 / (2.0 * sigma2);
        let mut gamma = start.to_vec();
        project_capped_simplex(&mut gamma, self.cap);
        let mut y = gamma.clone();
        let mut t: f64 = 1.0;
        let mut best = gamma.clone();
        let mut best_viol = self.violation(&self.gaps(&gamma));
        if best_viol <= 0.0 {
            return (best, best_viol);
        }
        let mut grad_dir = vec![0.0; self.n];
        let mut u = vec![0.0; self.p];
        let mut prev_phi = f64::INFINITY;
        for _ in 0..max_iter {
            let gaps = self.gaps(&y);
            let mut phi = 0.0;
            for j in 0..self.p {
                let excess = gaps[j].abs() - self.delta[j];
                if excess > 0.0 {
                    u[j] = 2.0 * excess * gaps[j].signum();
                    phi += excess * excess;
                } else {
                    u[j] = 0.0;
                }
            }
            if phi == 0.0 {
                return (y, self.violation(&gaps));
            }
            self.h_times(&u, &mut grad_dir);
            let mut next = vec![0.0; self.n];
            for i in 0..self.n {
                next[i] = y[i] - step * grad_dir[i];
            }
            project_capped_simplex(&mut next, self.cap);
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / t_next;
            for i in 0..self.n {
                y[i] = next[i] + beta * (next[i] - gamma[i]);
            }
            project_capped_simplex(&mut y, self.cap);
            gamma = next;
            t = if phi > prev_phi { 1.0 } else { t_next };
            prev_phi = phi;

            let viol = self.violation(&self.gaps(&gamma));
            if viol < best_viol {
                best_viol = viol;
                best.copy_from_slice(&gamma);
                if best_viol <= 0.0 {
                    return (best, best_viol);
                }
            }
        }
        (best, best_viol)
    }

    /// Equality-constrained refinement on the identified active set. Only
    /// adopted when the candidate is feasible and no worse.
    fn polish(&self, gamma: &[f64]) -> Option<Vec<f64>> {
        let gaps = self.gaps(gamma);
        let zero_tol = 1e-10;
        let cap_tol = self.cap * 1e-8;
        let free: Vec<usize> = (0..self.n)
            .filter(|&i| gamma[i] > zero_tol && gamma[i] < self.cap - cap_tol)
            .collect();
        let at_cap: Vec<usize> = (0..self.n)
            .filter(|&i| gamma[i] >= self.cap - cap_tol)
            .collect();
        if free.is_empty() {
            return None;
        }
        // Active balance constraints, pinned at the signed bound.
        let act_tol = |d: f64| (1e-6 * (1.0 + d)).max(1e-9);
        let active: Vec<(usize, f64)> = (0..self.p)
            .filter(|&j| gaps[j].abs() >= self.delta[j] - act_tol(self.delta[j]))
            .map(|j| (j, gaps[j].signum() * self.delta[j] + self.target[j]))
            .collect();
        let k = active.len() + 1;
        if k > free.len() || k > 200 {
            return None;
        }

        // Basis B over free coords: the all-ones column plus each active
        // history column; min ||γ_F||² s.t. B^T γ_F = b gives
        // γ_F = B (B^T B)^{-1} b.
        let nf = free.len();
        let mut b_mat = vec![0.0; nf * k];
        for (r, &i) in free.iter().enumerate() {
            b_mat[r * k] = 1.0;
            for (c, &(j, _)) in active.iter().enumerate() {
                b_mat[r * k + c + 1] = self.h_rows[i * self.p + j];
            }
        }
        let cap_mass: f64 = at_cap.len() as f64 * self.cap;
        let mut rhs = vec![0.0; k];
        rhs[0] = 1.0 - cap_mass;
        for (c, &(j, bound)) in active.iter().enumerate() {
            let fixed: f64 = at_cap
                .iter()
                .map(|&i| self.cap * self.h_rows[i * self.p + j])
                .sum();
            rhs[c + 1] = bound - fixed;
        }

        let mut gram = vec![0.0; k * k];
        for r in 0..nf {
            let row = &b_mat[r * k..(r + 1) * k];
            for a in 0..k {
                for b in a..k {
                    gram[a * k + b] += row[a] * row[b];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                gram[a * k + b] = gram[b * k + a];
            }
        }
        let nu = cholesky_solve(&mut gram, &rhs, k)?;

        let mut cand = vec![0.0; self.n];
        for &i in &at_cap {
            cand[i] = self.cap;
        }
        for (r, &i) in free.iter().enumerate() {
            let row = &b_mat[r * k..(r + 1) * k];
            let mut acc = 0.0;
            for a in 0..k {
                acc += row[a] * nu[a];
            }
            cand[i] = acc;
        }
        if !self.is_feasible(&cand) {
            return None;
        }
        let obj_new: f64 = cand.iter().map(|g| g * g).sum();
        let obj_old: f64 = gamma.iter().map(|g| g * g).sum();
        if obj_new <= obj_old + 1e-15 {
            Some(cand)
        } else {
            None
        }
    }

    /// Feasibility-only check: finds any point satisfying the constraints
    /// (or the least-infeasible one). Much cheaper than a full solve; used
    /// by the tuning grid search to probe candidate slacks.
    pub fn find_feasible(&self, max_iter: usize) -> QpSolution {
        let sigma2 = self.spectral_norm_sq();
        let uniform = vec![1.0 / self.n as f64; self.n];
        let (point, viol) = self.feasibility_descent(&uniform, sigma2, max_iter);
        let gaps = self.gaps(&point);
        let objective = point.iter().map(|g| g * g).sum();
        QpSolution {
            gamma: point,
            feasible: viol <= FEAS_TOL,
            gaps,
            objective,
            iterations: max_iter,
        }
    }

    /// Full solve: feasibility phase, accelerated dual ascent, feasibility
    /// restoration, and active-set polish.
    pub fn solve(&self, cfg: &QpConfig) -> QpSolution {
        let sigma2 = self.spectral_norm_sq();

        // Phase 1: find any feasible point (or the least-infeasible one).
        let uniform = vec![1.0 / self.n as f64; self.n];
        let (feas_point, viol) = self.feasibility_descent(&uniform, sigma2, cfg.max_iter);
        if viol > 0.0 {
            let gaps = self.gaps(&feas_point);
            let objective = feas_point.iter().map(|g| g * g).sum();
            return QpSolution {
                gamma: feas_point,
                feasible: false,
                gaps,
                objective,
                iterations: cfg.max_iter,
            };
        }

        // Phase 2: accelerated dual ascent on the balance multipliers.
        let step = 2.0 / sigma2;
        let mut u = vec![0.0; self.p];
        let mut u_prev = u.clone();
        let mut t: f64 = 1.0;
        let mut gamma = vec![0.0; self.n];
        let mut hv = vec![0.0; self.n];
        let mut iterations = 0;
        let mut prev_dual = f64::NEG_INFINITY;
        let mut best_dual = f64::NEG_INFINITY;
        let mut last_improve = 0usize;
        let mut best_feasible: Option<(f64, Vec<f64>)> = None;

        for it in 0..cfg.max_iter {
            iterations = it + 1;
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / t_next;
            let mut z = vec![0.0; self.p];
            for j in 0..self.p {
                z[j] = u[j] + beta * (u[j] - u_prev[j]);
            }
            self.h_times(&z, &mut hv);
            for i in 0..self.n {
                gamma[i] = -0.5 * hv[i];
            }
            project_capped_simplex(&mut gamma, self.cap);
            let gaps = self.gaps(&gamma);

            // Proximal ascent step with per-column soft threshold.
            let mut u_next = vec![0.0; self.p];
            for j in 0..self.p {
                let raw = z[j] + step * gaps[j];
                let th = step * self.delta[j];
                u_next[j] = if raw > th {
                    raw - th
                } else if raw < -th {
                    raw + th
                } else {
                    0.0
                };
            }
            u_prev = std::mem::replace(&mut u, u_next);
            t = t_next;

            let viol = self.violation(&gaps);
            let obj: f64 = gamma.iter().map(|g| g * g).sum();
            if viol <= FEAS_TOL * 0.5 {
                let better = best_feasible.as_ref().map_or(true, |(b, _)| obj < *b);
                if better {
                    best_feasible = Some((obj, gamma.clone()));
                }
            }

            if it % 25 == 24 {
                // Complementarity residual δ^T|u| − u^T gap, zero at KKT.
                let dual_resid: f64 = (0..self.p)
                    .map(|j| self.delta[j] * u[j].abs() - u[j] * gaps[j])
                    .sum();
                if viol <= FEAS_TOL * 0.1 && dual_resid.abs() <= cfg.tol * obj.max(1.0) {
                    break;
                }
                let dual_obj: f64 = obj
                    + (0..self.p)
                        .map(|j| u[j] * gaps[j] - self.delta[j] * u[j].abs())
                        .sum::<f64>();
                if dual_obj < prev_dual - 1e-14 {
                    t = 1.0; // adaptive restart
                }
                prev_dual = dual_obj;
                if dual_obj > best_dual + 1e-11 * obj.max(1e-9) {
                    best_dual = dual_obj;
                    last_improve = it;
                } else if it - last_improve > 1_500 {
                    break; // dual plateau
                }
            }
        }

        // Phase 3: restore exact feasibility from the dual iterate, then
        // polish on the active set.
        let (mut point, mut viol) = self.feasibility_descent(&gamma, sigma2, 4_000);
        if viol > 0.0 {
            if let Some((_, bf)) = &best_feasible {
                point = bf.clone();
            } else {
                point = feas_point;
            }
            viol = self.violation(&self.gaps(&point));
        }
        if let Some((obj_bf, bf)) = &best_feasible {
            let obj_now: f64 = point.iter().map(|g| g * g).sum();
            if *obj_bf < obj_now && viol <= 0.0 {
                point = bf.clone();
            }
        }
        for _ in 0..3 {
            match self.polish(&point) {
                Some(better) => point = better,
                None => break,
            }
        }

        let gaps = self.gaps(&point);
        let feasible = self.violation(&gaps) <= FEAS_TOL;
        let objective = point.iter().map(|g| g * g).sum();
        QpSolution {
            gamma: point,
            feasible,
            gaps,
            objective,
            iterations,
        }
    }
}

/// Solves the SPD system `A x = b` by Cholesky; `a` is row-major k×k and is
/// destroyed. Returns None when the factorization breaks down.
fn cholesky_solve(a: &mut [f64], b: &[f64], k: usize) -> Option<Vec<f64>> {
    for c in 0..k {
        for r in c..k {
            let mut sum = a[r * k + c];
            for t in 0..c {
                sum -= a[r * k + t] * a[c * k + t];
            }
            if r == c {
                if sum <= 1e-300 {
                    return None;
                }
                a[c * k + c] = sum.sqrt();
            } else {
                a[r * k + c] = sum / a[c * k + c];
            }
        }
    }
    let mut x = b.to_vec();
    for r in 0..k {
        for t in 0..r {
            x[r] -= a[r * k + t] * x[t];
        }
        x[r] /= a[r * k + r];
    }
    for r in (0..k).rev() {
        for t in r + 1..k {
            x[r] -= a[t * k + r] * x[t];
        }
        x[r] /= a[r * k + r];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn projection_uniform_and_caps() {
        let mut v = vec![0.0; 5];
        project_capped_simplex(&mut v, 1.0);
        for &g in &v {
            assert_abs_diff_eq!(g, 0.2, epsilon = 1e-12);
        }
        let mut v = vec![10.0, 0.0, 0.0, 0.0];
        project_capped_simplex(&mut v, 0.4);
        assert_abs_diff_eq!(v[0], 0.4, epsilon = 1e-10);
        assert_abs_diff_eq!(v.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn projection_random_sum_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let n = rng.gen_range(2..30);
            let cap = rng.gen_range((1.0 / n as f64)..1.0);
            let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            project_capped_simplex(&mut v, cap);
            assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            assert!(v.iter().all(|&g| (-1e-12..=cap + 1e-12).contains(&g)));
        }
    }

    #[test]
    fn unconstrained_problem_returns_uniform() {
        // delta effectively infinite: minimum-norm point on the simplex.
        let rows = vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]];
        let prog = BalanceProgram::new(rows, vec![1.5], vec![1e6], 1.0).unwrap();
        let sol = prog.solve(&QpConfig::default());
        assert!(sol.feasible);
        for &g in &sol.gamma {
            assert_abs_diff_eq!(g, 0.25, epsilon = 1e-8);
        }
    }

    /// Brute-force minimization over a fine simplex grid (toy sizes only).
    fn grid_oracle(rows: &[Vec<f64>], target: &[f64], delta: &[f64], cap: f64, k: usize) -> f64 {
        let n = rows.len();
        let p = target.len();
        let mut best = f64::INFINITY;
        let mut stack = vec![(0usize, k, Vec::<usize>::new())];
        while let Some((idx, left, partial)) = stack.pop() {
            if idx == n - 1 {
                let mut parts = partial.clone();
                parts.push(left);
                let gamma: Vec<f64> = parts.iter().map(|&c| c as f64 / k as f64).collect();
                if gamma.iter().any(|&g| g > cap + 1e-12) {
                    continue;
                }
                let mut ok = true;
                for j in 0..p {
                    let mom: f64 = (0..n).map(|i| gamma[i] * rows[i][j]).sum();
                    if (mom - target[j]).abs() > delta[j] + 1e-12 {
                        ok = false;
                        break;
                    }
                }
                if ok {
                    let obj: f64 = gamma.iter().map(|g| g * g).sum();
                    best = best.min(obj);
                }
                continue;
            }
            for c in 0..=left {
                let mut next = partial.clone();
                next.push(c);
                stack.push((idx + 1, left - c, next));
            }
        }
        best
    }

    #[test]
    fn toy_instance_matches_grid_oracle() {
        // H values 0,1,2,3; prev uniform, so the target moment is 1.5.
        let rows = vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]];
        let target = vec![1.5];
        let delta = vec![0.01];
        let prog = BalanceProgram::new(rows.clone(), target.clone(), delta.clone(), 1.0).unwrap();
        let sol = prog.solve(&QpConfig::default());
        assert!(sol.feasible);
        let oracle = grid_oracle(&rows, &target, &delta, 1.0, 200);
        assert!(
            (sol.objective - oracle).abs() < 1e-3,
            "{} vs {}",
            sol.objective,
            oracle
        );
        assert!(sol.objective <= oracle + 1e-9);
    }

    #[test]
    fn empty_mask_is_infeasible() {
        let err = BalanceProgram::new(vec![], vec![0.0], vec![0.1], 1.0).unwrap_err();
        assert!(matches!(err, DcbError::Infeasible { .. }));
    }

    #[test]
    fn infeasible_instance_reports_least_infeasible() {
        // Single unit forced to weight 1; its moment is far from the target.
        let rows = vec![vec![5.0]];
        let prog = BalanceProgram::new(rows, vec![0.0], vec![0.1], 1.0).unwrap();
        let sol = prog.solve(&QpConfig::default());
        assert!(!sol.feasible);
        assert_abs_diff_eq!(sol.gamma[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.gaps[0], 5.0, epsilon = 1e-12);
    }

    #[test]
    fn monotone_in_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 12;
        let p = 3;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..p)
                    .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect()
            })
            .collect();
        let target: Vec<f64> = (0..p)
            .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64)
            .collect();
        let mut prev_obj = f64::INFINITY;
        for &d in &[0.05, 0.1, 0.2, 0.5, 1.0, 5.0] {
            let prog = BalanceProgram::new(rows.clone(), target.clone(), vec![d; p], 0.6).unwrap();
            let sol = prog.solve(&QpConfig::default());
            assert!(sol.feasible, "delta={d} should be feasible");
            assert!(
                sol.objective <= prev_obj + 1e-7,
                "objective increased when delta grew: {} -> {} at delta={}",
                prev_obj,
                sol.objective,
                d
            );
            prev_obj = sol.objective;
        }
    }

    #[test]
    fn feasible_outputs_respect_all_constraints() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let n = rng.gen_range(4..30);
            let p = rng.gen_range(1..5);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    (0..p)
                        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                        .collect()
                })
                .collect();
            // A guaranteed-feasible instance around a random reference point.
            let mut reference: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let cap = rng.gen_range((2.0 / n as f64)..1.0);
            project_capped_simplex(&mut reference, cap);
            let target: Vec<f64> = (0..p)
                .map(|j| (0..n).map(|i| reference[i] * rows[i][j]).sum())
                .collect();
            let delta: Vec<f64> = (0..p).map(|_| rng.gen_range(0.01..0.3)).collect();
            let prog = BalanceProgram::new(rows, target, delta.clone(), cap).unwrap();
            let sol = prog.solve(&QpConfig::default());
            assert!(sol.feasible);
            assert!((sol.gamma.iter().sum::<f64>() - 1.0).abs() <= 1e-8);
            assert!(sol.gamma.iter().all(|&g| g >= -1e-10));
            assert!(sol.gamma.iter().all(|&g| g <= prog.cap() + 1e-10));
            for (g, d) in sol.gaps.iter().zip(&delta) {
                assert!(g.abs() <= d + 1e-8);
            }
        }
    }
}
