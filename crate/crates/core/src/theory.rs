//! Risk functionals and variational weight rules, with brute-force checks.
//!
//! A schedule over `N` reference intervals of lengths `Δ_i` is described by
//! simplex weights `w_i` (the share of the step budget spent in interval
//! `i`). With local-error coefficients `A_i` the leading Euler error proxy is
//! `J(w) = Σ A_i Δ_i² / w_i`, minimized by `w_i ∝ Δ_i √A_i`.

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Rng};

/// Tolerance of the simplex constraint.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// Interval lengths and local-error coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskProfile {
    intervals: Vec<f64>,
    coefficients: Vec<f64>,
}

impl RiskProfile {
    pub fn new(intervals: Vec<f64>, coefficients: Vec<f64>) -> Result<Self> {
        if intervals.is_empty() || intervals.len() != coefficients.len() {
            return Err(Error::Contract(format!(
                "{} intervals for {} coefficients",
                intervals.len(),
                coefficients.len()
            )));
        }
        if intervals.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
            return Err(Error::Domain("interval lengths must be positive".into()));
        }
        let total: f64 = intervals.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Domain(format!("interval lengths sum to {total}, not 1")));
        }
        if coefficients.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) {
            return Err(Error::Domain("coefficients must be finite and nonnegative".into()));
        }
        Ok(Self {
            intervals,
            coefficients,
        })
    }

    /// Equal intervals `Δ_i = 1/N`.
    pub fn equal_width(coefficients: Vec<f64>) -> Result<Self> {
        let n = coefficients.len().max(1);
        Self::new(vec![1.0 / n as f64; coefficients.len()], coefficients)
    }

    pub fn intervals(&self) -> &[f64] {
        &self.intervals
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    /// `D₂ = Σ Δ_i²`.
    pub fn d2(&self) -> f64 {
        self.intervals.iter().map(|d| d * d).sum()
    }
}

/// Nonnegative weights on the simplex.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Weights(Vec<f64>);

impl Weights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() || w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Domain("weights must be finite and nonnegative".into()));
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Domain(format!("weights sum to {total}, not 1")));
        }
        Ok(Self(w))
    }

    /// Normalizes a nonnegative vector.
    pub fn normalized(raw: Vec<f64>) -> Result<Self> {
        if raw.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Domain("weights must be finite and nonnegative".into()));
        }
        let total: f64 = raw.iter().sum();
        if !(total > 0.0) {
            return Err(Error::DegenerateProfile);
        }
        Self::new(raw.into_iter().map(|v| v / total).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Clamp-and-renormalize onto `{w : w_i ≥ ω}`.
    ///
    /// Entries that would fall below the floor are pinned to `ω`; the rest
    /// share the remaining mass in proportion to their original values. This
    /// is an approximation of the constrained risk minimizer.
    pub fn with_floor(&self, omega: f64) -> Result<Self> {
        let n = self.0.len();
        if !(omega >= 0.0) || omega * n as f64 > 1.0 {
            return Err(Error::Domain(format!(
                "floor {omega} is infeasible for {n} weights"
            )));
        }
        let mut pinned = vec![false; n];
        loop {
            let k = pinned.iter().filter(|p| **p).count();
            let free_mass = 1.0 - k as f64 * omega;
            let free_total: f64 = (0..n).filter(|i| !pinned[*i]).map(|i| self.0[i]).sum();
            let mut out = vec![omega; n];
            for i in (0..n).filter(|i| !pinned[*i]) {
                out[i] = if free_total > 0.0 {
                    self.0[i] / free_total * free_mass
                } else {
                    free_mass / (n - k) as f64
                };
            }
            let newly: Vec<usize> = (0..n).filter(|i| !pinned[*i] && out[*i] < omega).collect();
            if newly.is_empty() {
                return Self::new(out);
            }
            for i in newly {
                pinned[i] = true;
            }
        }
    }
}

/// `ψ_β(r) = (r^{-β} - 1)/β`, and `-ln r` at `β = 0`.
pub fn psi_beta(r: f64, beta: f64) -> Result<f64> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::Domain(format!("psi needs r > 0, got {r}")));
    }
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::Domain(format!("psi needs beta >= 0, got {beta}")));
    }
    if beta == 0.0 {
        Ok(-r.ln())
    } else {
        Ok((-beta * r.ln()).exp_m1() / beta)
    }
}

/// Minimizer of the `ψ_β` variational family on equal cells:
/// `ρ ∝ I^{1/(β+1)}`, returned as cell masses summing to one.
pub fn variational_density(intensity: &[f64], beta: f64) -> Result<Vec<f64>> {
    if intensity.is_empty() || intensity.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::Domain("intensity must be positive".into()));
    }
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::Domain(format!("beta must be >= 0, got {beta}")));
    }
    let exponent = 1.0 / (beta + 1.0);
    let raw: Vec<f64> = if beta == 0.0 {
        intensity.to_vec()
    } else {
        intensity.iter().map(|v| v.powf(exponent)).collect()
    };
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// `w_i ∝ Δ_i φ_i^γ`, with `φ` taken from the profile's coefficients.
pub fn discrete_gamma_weights(profile: &RiskProfile, gamma: f64) -> Result<Weights> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::Domain(format!("gamma must be >= 0, got {gamma}")));
    }
    if profile.coefficients.iter().all(|p| *p == 0.0) {
        return Err(Error::DegenerateProfile);
    }
    Weights::normalized(
        profile
            .intervals
            .iter()
            .zip(&profile.coefficients)
            .map(|(d, p)| d * p.powf(gamma))
            .collect(),
    )
}

/// `J(w) = Σ A_i Δ_i² / w_i`.
pub fn euler_risk(weights: &Weights, profile: &RiskProfile) -> Result<f64> {
    if weights.0.len() != profile.len() {
        return Err(Error::Contract(format!(
            "{} weights for {} intervals",
            weights.0.len(),
            profile.len()
        )));
    }
    let mut total = 0.0;
    for (i, ((w, a), d)) in weights
        .0
        .iter()
        .zip(&profile.coefficients)
        .zip(&profile.intervals)
        .enumerate()
    {
        if *a == 0.0 {
            continue;
        }
        if *w == 0.0 {
            return Err(Error::InfiniteRisk { index: i });
        }
        total += a * d * d / w;
    }
    if total.is_finite() {
        Ok(total)
    } else {
        Err(Error::Numeric("Euler risk overflowed".into()))
    }
}

/// `w*_i = Δ_i √A_i / Σ Δ_ℓ √A_ℓ` and the optimal value `(Σ Δ_i √A_i)²`.
///
/// Zero coefficients are rejected; floor them (e.g. with `ε_a`) first.
pub fn oracle_weights(profile: &RiskProfile) -> Result<(Weights, f64)> {
    if let Some(i) = profile.coefficients.iter().position(|a| !(*a > 0.0)) {
        return Err(Error::Domain(format!(
            "oracle weights need positive coefficients; A_{i} = {}",
            profile.coefficients[i]
        )));
    }
    let raw: Vec<f64> = profile
        .intervals
        .iter()
        .zip(&profile.coefficients)
        .map(|(d, a)| d * a.sqrt())
        .collect();
    let s: f64 = raw.iter().sum();
    Ok((Weights::normalized(raw)?, s * s))
}

/// Uniform-in-time weights `w_i = Δ_i`.
pub fn uniform_weights(profile: &RiskProfile) -> Weights {
    Weights(profile.intervals.clone())
}

/// Exhaustive search over simplex points whose coordinates are positive
/// multiples of `step`. Supports `N ∈ {2, 3}`.
pub fn simplex_grid_minimum(profile: &RiskProfile, step: f64) -> Result<(Vec<f64>, f64)> {
    let m = (1.0 / step).round() as usize;
    if !(step > 0.0) || m < 3 {
        return Err(Error::Domain(format!("grid step {step} is too coarse")));
    }
    let mut best = (Vec::new(), f64::INFINITY);
    let mut consider = |w: Vec<f64>| -> Result<()> {
        let j = euler_risk(&Weights(w.clone()), profile)?;
        if j < best.1 {
            best = (w, j);
        }
        Ok(())
    };
    match profile.len() {
        2 => {
            for i in 1..m {
                let a = i as f64 / m as f64;
                consider(vec![a, 1.0 - a])?;
            }
        }
        3 => {
            for i in 1..m {
                for j in 1..(m - i) {
                    let a = i as f64 / m as f64;
                    let b = j as f64 / m as f64;
                    consider(vec![a, b, 1.0 - a - b])?;
                }
            }
        }
        n => {
            return Err(Error::Domain(format!(
                "grid enumeration supports N = 2 or 3, got {n}"
            )))
        }
    }
    Ok(best)
}

/// Nearest simplex point with coordinates on the `step` lattice, every
/// coordinate at least one step.
pub fn round_to_grid(weights: &Weights, step: f64) -> Weights {
    let m = (1.0 / step).round() as i64;
    let n = weights.0.len();
    let mut ticks: Vec<i64> = weights.0[..n - 1]
        .iter()
        .map(|w| ((w * m as f64).round() as i64).max(1))
        .collect();
    while ticks.iter().sum::<i64>() > m - 1 {
        let i = (0..ticks.len()).max_by_key(|i| ticks[*i]).expect("non-empty");
        ticks[i] -= 1;
    }
    let mut w: Vec<f64> = ticks.iter().map(|t| *t as f64 / m as f64).collect();
    w.push(1.0 - w.iter().sum::<f64>());
    Weights(w)
}

/// Euclidean projection onto `{w : Σ w = 1, w ≥ floor}`.
fn project_simplex(v: &[f64], floor: f64) -> Vec<f64> {
    let n = v.len();
    let shifted: Vec<f64> = v.iter().map(|x| x - floor).collect();
    let target = 1.0 - floor * n as f64;
    let mut sorted = shifted.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (k, u) in sorted.iter().enumerate() {
        cum += u;
        let t = (cum - target) / (k + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    shifted.iter().map(|x| (x - theta).max(0.0) + floor).collect()
}

/// Projected random search for `N ≤ 6`: Gaussian perturbations projected
/// back onto the simplex, keeping improvements and slowly shrinking.
pub fn random_search_minimum(profile: &RiskProfile, iterations: usize, seed: u64) -> Result<(Vec<f64>, f64)> {
    let n = profile.len();
    if n > 6 {
        return Err(Error::Domain(format!("random search supports N <= 6, got {n}")));
    }
    let mut rng = stream_rng(seed, 0);
    let floor = 1e-9;
    let mut w = vec![1.0 / n as f64; n];
    let mut best = euler_risk(&Weights(w.clone()), profile)?;
    let mut scale = 0.2;
    for _ in 0..iterations {
        let noise = Normal::new(0.0, scale).expect("positive scale");
        let cand: Vec<f64> = w.iter().map(|x| x + noise.sample(&mut rng)).collect();
        let cand = project_simplex(&cand, floor);
        let j = euler_risk(&Weights(cand.clone()), profile)?;
        if j < best {
            best = j;
            w = cand;
        } else {
            scale = (scale * 0.995).max(1e-7);
        }
    }
    Ok((w, best))
}

/// Largest relative spread of `A_i Δ_i² / w_i²` around its mean. Zero exactly
/// at the unconstrained minimizer, where the Lagrange condition makes every
/// ratio equal.
pub fn first_order_residual(weights: &Weights, profile: &RiskProfile) -> f64 {
    let g: Vec<f64> = weights
        .0
        .iter()
        .zip(&profile.coefficients)
        .zip(&profile.intervals)
        .map(|((w, a), d)| a * d * d / (w * w))
        .collect();
    let mean = g.iter().sum::<f64>() / g.len() as f64;
    g.iter().map(|v| (v - mean).abs() / mean).fold(0.0, f64::max)
}

/// A random profile with `n` intervals: Dirichlet(1) lengths and
/// log-normal coefficients.
pub fn random_profile(rng: &mut Rng, n: usize) -> RiskProfile {
    let raw: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln() + 1e-3).collect();
    let total: f64 = raw.iter().sum();
    let mut intervals: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let drift: f64 = 1.0 - intervals.iter().sum::<f64>();
    intervals[0] += drift;
    let coefficients = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (1.5 * z).exp()
        })
        .collect();
    RiskProfile::new(intervals, coefficients).expect("valid random profile")
}

/// Random point on the simplex (flat Dirichlet).
pub fn random_weights(rng: &mut Rng, n: usize) -> Weights {
    let raw: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln() + 1e-12).collect();
    Weights::normalized(raw).expect("positive draws")
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct TheoryReport {
    pub checks: Vec<CheckResult>,
}

impl TheoryReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Runs every property check of this module against its brute-force oracle.
pub fn verify_all(seed: u64) -> Result<TheoryReport> {
    let mut checks = Vec::new();
    let mut push = |name: &str, passed: bool, detail: String| {
        checks.push(CheckResult {
            name: name.into(),
            passed,
            detail,
        })
    };

    let psi_half = psi_beta(0.5, 1.0)?;
    let psi_limit = psi_beta(0.5, 1e-8)?;
    push(
        "psi examples and beta->0 limit",
        psi_beta(1.0, 2.7)? == 0.0 && psi_half == 1.0 && (psi_limit - 2f64.ln()).abs() < 1e-6,
        format!("psi_1(0.5) = {psi_half}, psi_1e-8(0.5) = {psi_limit}"),
    );

    let rho = variational_density(&[1.0, 4.0], 1.0)?;
    push(
        "variational density square-root case",
        (rho[0] - 1.0 / 3.0).abs() < 1e-15 && (rho[1] - 2.0 / 3.0).abs() < 1e-15,
        format!("{rho:?}"),
    );

    let mut rng = stream_rng(seed, 1);
    let mut worst_cont: f64 = 0.0;
    let mut worst_consistency: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(2..12);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..10.0)).collect();
        let d0 = variational_density(&a, 0.0)?;
        let d_eps = variational_density(&a, 1e-8)?;
        worst_cont = worst_cont.max(d0.iter().zip(&d_eps).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
        let beta = rng.random_range(0.0..3.0);
        let rho = variational_density(&a, beta)?;
        let w = discrete_gamma_weights(&RiskProfile::equal_width(a)?, 1.0 / (beta + 1.0))?;
        worst_consistency = worst_consistency.max(
            rho.iter().zip(w.as_slice()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max),
        );
    }
    push("beta continuity", worst_cont < 1e-6, format!("sup-norm gap {worst_cont:e}"));
    push(
        "gamma weights match variational density",
        worst_consistency < 1e-12,
        format!("max gap {worst_consistency:e}"),
    );

    let two = RiskProfile::new(vec![0.5, 0.5], vec![1.0, 4.0])?;
    let (w_star, value) = oracle_weights(&two)?;
    let (grid_w, grid_j) = simplex_grid_minimum(&two, 0.001)?;
    push(
        "oracle vs grid search, N=2",
        (grid_j - 2.25).abs() < 0.01
            && (value - 2.25).abs() < 1e-12
            && (grid_w[0] - 1.0 / 3.0).abs() < 0.002
            && (w_star.as_slice()[0] - 1.0 / 3.0).abs() < 1e-12,
        format!("grid {grid_j} at {grid_w:?}, oracle {value}"),
    );

    // Within resolution: the grid optimum is never below the oracle value and
    // never above the risk of the grid point nearest to the oracle weights.
    let mut grid_failures = 0;
    for _ in 0..20 {
        for n in [2, 3] {
            let p = random_profile(&mut rng, n);
            let (w, v) = oracle_weights(&p)?;
            let (_, g) = simplex_grid_minimum(&p, 0.002)?;
            let nearest = euler_risk(&round_to_grid(&w, 0.002), &p)?;
            if g < v - 1e-12 || g > nearest + 1e-12 {
                grid_failures += 1;
            }
        }
    }
    push(
        "grid search agrees with oracle, N in {2,3}",
        grid_failures == 0,
        format!("{grid_failures} of 40 profiles outside resolution"),
    );

    let mut worst_random: f64 = 0.0;
    for k in 0..20 {
        let n = 4 + k % 3;
        let p = random_profile(&mut rng, n);
        let (_, v) = oracle_weights(&p)?;
        let (_, r) = random_search_minimum(&p, 4000, seed.wrapping_add(k as u64))?;
        worst_random = worst_random.max((v - r) / v);
    }
    push(
        "random search never beats oracle, N <= 6",
        worst_random <= 1e-12,
        format!("largest undercut {worst_random:e}"),
    );

    let mut worst_foc: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(7..200);
        let p = random_profile(&mut rng, n);
        let (w, _) = oracle_weights(&p)?;
        worst_foc = worst_foc.max(first_order_residual(&w, &p));
    }
    push("first-order condition, large N", worst_foc < 1e-9, format!("max residual {worst_foc:e}"));

    let mut violations = 0;
    let mut mc_violations = 0;
    for _ in 0..1000 {
        let n = rng.random_range(2..30);
        let p = random_profile(&mut rng, n);
        let (w, v) = oracle_weights(&p)?;
        let j_star = euler_risk(&w, &p)?;
        let j_unif = euler_risk(&uniform_weights(&p), &p)?;
        if j_star > j_unif + 1e-12 || (j_star - v).abs() > 1e-12 * v.max(1.0) {
            violations += 1;
        }
        let r = random_weights(&mut rng, n);
        if euler_risk(&r, &p)? < v - 1e-12 {
            mc_violations += 1;
        }
    }
    push(
        "Cauchy-Schwarz dominance over uniform weights",
        violations == 0,
        format!("{violations} violations in 1000 profiles"),
    );
    push(
        "oracle below random simplex weights",
        mc_violations == 0,
        format!("{mc_violations} violations in 1000 draws"),
    );

    let constant = RiskProfile::new(vec![0.2, 0.3, 0.5], vec![2.0; 3])?;
    let (w, v) = oracle_weights(&constant)?;
    let j_unif = euler_risk(&uniform_weights(&constant), &constant)?;
    push(
        "equality for constant coefficients",
        (v - j_unif).abs() < 1e-9 && (v - 2.0).abs() < 1e-12 && (euler_risk(&w, &constant)? - v).abs() < 1e-12,
        format!("oracle {v}, uniform {j_unif}"),
    );

    Ok(TheoryReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn psi_examples() {
        for beta in [0.0, 0.3, 1.0, 5.0] {
            assert_eq!(psi_beta(1.0, beta).unwrap(), 0.0);
        }
        assert_eq!(psi_beta(0.5, 1.0).unwrap(), 1.0);
        assert!((psi_beta(0.5, 1e-8).unwrap() - 0.5f64.ln().abs()).abs() < 1e-6);
        assert!(matches!(psi_beta(0.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(psi_beta(-1.0, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn variational_examples() {
        for beta in [0.0, 0.5, 2.0] {
            assert_eq!(variational_density(&[3.0; 4], beta).unwrap(), vec![0.25; 4]);
        }
        let rho = variational_density(&[1.0, 4.0], 1.0).unwrap();
        assert!((rho[0] - 1.0 / 3.0).abs() < 1e-15 && (rho[1] - 2.0 / 3.0).abs() < 1e-15);
        let i = [0.5, 1.5, 3.0];
        let total: f64 = i.iter().sum();
        let rho = variational_density(&i, 0.0).unwrap();
        for (r, v) in rho.iter().zip(i) {
            assert_eq!(*r, v / total);
        }
        assert!(matches!(variational_density(&[1.0, 0.0], 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn gamma_weight_examples() {
        let p = RiskProfile::new(vec![0.5, 0.5], vec![1.0, 4.0]).unwrap();
        let w = discrete_gamma_weights(&p, 0.5).unwrap();
        assert!((w.as_slice()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(discrete_gamma_weights(&p, 0.0).unwrap().as_slice(), &[0.5, 0.5]);
        let q = RiskProfile::new(vec![0.2, 0.8], vec![1.0, 1.0]).unwrap();
        for g in [0.3, 1.0, 2.0] {
            assert_eq!(discrete_gamma_weights(&q, g).unwrap().as_slice(), &[0.2, 0.8]);
        }
        let zero = RiskProfile::new(vec![0.5, 0.5], vec![0.0, 0.0]).unwrap();
        assert!(matches!(discrete_gamma_weights(&zero, 1.0), Err(Error::DegenerateProfile)));
    }

    #[test]
    fn risk_examples() {
        let flat = RiskProfile::new(vec![0.5, 0.5], vec![1.0, 1.0]).unwrap();
        let half = Weights::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(euler_risk(&half, &flat).unwrap(), 1.0);
        let p = RiskProfile::new(vec![0.5, 0.5], vec![1.0, 4.0]).unwrap();
        assert_eq!(euler_risk(&half, &p).unwrap(), 2.5);
        let (w, v) = oracle_weights(&p).unwrap();
        assert_eq!(v, 2.25);
        assert!((euler_risk(&w, &p).unwrap() - 2.25).abs() < 1e-12);
        let zero = Weights::new(vec![1.0, 0.0]).unwrap();
        assert!(matches!(euler_risk(&zero, &p), Err(Error::InfiniteRisk { index: 1 })));
        let idle = RiskProfile::new(vec![0.5, 0.5], vec![1.0, 0.0]).unwrap();
        assert_eq!(euler_risk(&zero, &idle).unwrap(), 0.25);
    }

    #[test]
    fn oracle_examples() {
        let c = RiskProfile::new(vec![0.1, 0.6, 0.3], vec![3.0; 3]).unwrap();
        let (w, v) = oracle_weights(&c).unwrap();
        for (a, b) in w.as_slice().iter().zip(c.intervals()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((v - 3.0).abs() < 1e-12);
        let z = RiskProfile::new(vec![0.5, 0.5], vec![1.0, 0.0]).unwrap();
        assert!(matches!(oracle_weights(&z), Err(Error::Domain(_))));
    }

    #[test]
    fn grid_search_finds_two_point_minimum() {
        let p = RiskProfile::new(vec![0.5, 0.5], vec![1.0, 4.0]).unwrap();
        let (w, j) = simplex_grid_minimum(&p, 0.001).unwrap();
        assert!((j - 2.25).abs() < 0.01);
        assert!((w[0] - 0.333).abs() < 0.002 && (w[1] - 0.667).abs() < 0.002);
    }

    #[test]
    fn grid_search_three_points() {
        let p = RiskProfile::new(vec![0.2, 0.3, 0.5], vec![4.0, 1.0, 9.0]).unwrap();
        let (w, j) = simplex_grid_minimum(&p, 0.002).unwrap();
        let (ws, v) = oracle_weights(&p).unwrap();
        assert!(j >= v && j - v < 1e-3 * v);
        for (a, b) in w.iter().zip(ws.as_slice()) {
            assert!((a - b).abs() < 0.01);
        }
    }

    #[test]
    fn random_search_approaches_oracle() {
        let mut rng = stream_rng(3, 0);
        for n in 4..=6 {
            let p = random_profile(&mut rng, n);
            let (_, v) = oracle_weights(&p).unwrap();
            let (_, r) = random_search_minimum(&p, 6000, n as u64).unwrap();
            assert!(r >= v - 1e-12 && r < v * 1.01, "n={n}: {r} vs {v}");
        }
    }

    #[test]
    fn floor_clamps_and_renormalizes() {
        let w = Weights::new(vec![0.001, 0.299, 0.7]).unwrap();
        let f = w.with_floor(0.05).unwrap();
        let s = f.as_slice();
        assert_eq!(s[0], 0.05);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((s[1] / s[2] - 0.299 / 0.7).abs() < 1e-12);
        assert!(w.with_floor(0.4).is_err());
    }

    #[test]
    fn projection_lands_on_simplex() {
        let p = project_simplex(&[0.9, 0.8, -0.3], 0.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((p[0] - 0.55).abs() < 1e-12 && (p[1] - 0.45).abs() < 1e-12 && p[2] == 0.0);
    }

    #[test]
    fn full_suite_passes() {
        let report = verify_all(0).unwrap();
        for c in &report.checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    proptest! {
        #[test]
        fn oracle_dominates_uniform(seed in 0u64..10_000, n in 2usize..40) {
            let p = random_profile(&mut stream_rng(seed, 0), n);
            let (w, v) = oracle_weights(&p).unwrap();
            prop_assert!((euler_risk(&w, &p).unwrap() - v).abs() <= 1e-12 * v.max(1.0));
            prop_assert!(v <= euler_risk(&uniform_weights(&p), &p).unwrap() + 1e-12);
            prop_assert!(first_order_residual(&w, &p) < 1e-9);
        }

        #[test]
        fn constant_coefficients_give_equality(a in 0.01..100.0f64, seed in 0u64..1000, n in 2usize..20) {
            let base = random_profile(&mut stream_rng(seed, 0), n);
            let p = RiskProfile::new(base.intervals().to_vec(), vec![a; n]).unwrap();
            let (_, v) = oracle_weights(&p).unwrap();
            let u = euler_risk(&uniform_weights(&p), &p).unwrap();
            prop_assert!((v - u).abs() <= 1e-9 * u);
        }

        #[test]
        fn gamma_weights_on_simplex(seed in 0u64..1000, n in 1usize..30, gamma in 0.0..3.0f64) {
            let p = random_profile(&mut stream_rng(seed, 0), n);
            let w = discrete_gamma_weights(&p, gamma).unwrap();
            prop_assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL);
        }
    }
}
