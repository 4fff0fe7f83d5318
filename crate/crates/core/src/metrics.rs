//! Sample-based distribution metrics: kNN Density / Coverage and an
//! entropic (Sinkhorn) squared 2-Wasserstein cost.

use std::cmp::Ordering;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn rows(m: ArrayView2<'_, f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Squared distance from each real point to its `k`-th nearest other real point.
pub fn knn_radii_sq(real: ArrayView2<'_, f64>, k: usize) -> Result<Vec<f64>> {
    let n = real.nrows();
    if k == 0 || n <= k {
        return Err(Error::Config(format!(
            "need more than k = {k} real samples, got {n}"
        )));
    }
    let pts = rows(real);
    Ok(pts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d: Vec<f64> = pts
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| sq_dist(p, q))
                .collect();
            let (_, kth, _) = d.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
            *kth
        })
        .collect())
}

/// `(density, coverage)` with inclusive kNN balls around the real samples.
///
/// Density is `Σ_j Σ_i 1[‖g_j - r_i‖ ≤ NND_k(r_i)] / (k · |gen|)`; coverage is
/// the share of real points whose ball holds at least one generated point.
pub fn density_coverage(real: ArrayView2<'_, f64>, gen: ArrayView2<'_, f64>, k: usize) -> Result<(f64, f64)> {
    if gen.nrows() == 0 {
        return Err(Error::Contract("generated sample set is empty".into()));
    }
    if real.ncols() != gen.ncols() {
        return Err(Error::Contract(format!(
            "real points have dimension {}, generated {}",
            real.ncols(),
            gen.ncols()
        )));
    }
    let radii = knn_radii_sq(real, k)?;
    let real_pts = rows(real);
    let gen_pts = rows(gen);
    // Per real point: how many generated points fall in its ball.
    let counts: Vec<usize> = real_pts
        .par_iter()
        .zip(&radii)
        .map(|(r, rad)| gen_pts.iter().filter(|g| sq_dist(g, r) <= *rad).count())
        .collect();
    let total: usize = counts.iter().sum();
    let covered = counts.iter().filter(|c| **c > 0).count();
    Ok((
        total as f64 / (k as f64 * gen.nrows() as f64),
        covered as f64 / real.nrows() as f64,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SinkhornMode {
    /// Scaling iterations on a kernel whose potentials are periodically
    /// absorbed into log-domain duals.
    Stabilized,
    /// Log-sum-exp updates of the dual potentials; slower, no overflow.
    LogDomain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkhornConfig {
    pub eps: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub mode: SinkhornMode,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            eps: 0.01,
            tol: 1e-6,
            max_iters: 10_000,
            mode: SinkhornMode::Stabilized,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SinkhornStatus {
    Converged,
    /// Iteration cap reached; the value is from the last iterate.
    MaxIterations,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornResult {
    /// Transport cost `⟨P, C⟩`, without the entropy term.
    pub value: f64,
    pub status: SinkhornStatus,
    /// Iterations at the target `ε`.
    pub iterations: usize,
    /// Row-marginal L1 violation at exit.
    pub marginal_error: f64,
}

/// Orders the pair so that swapping the arguments replays the same
/// computation on the transposed problem.
fn canonical_first(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> bool {
    match a.nrows().cmp(&b.nrows()) {
        Ordering::Less => return true,
        Ordering::Greater => return false,
        Ordering::Equal => {}
    }
    for (x, y) in a.iter().zip(b.iter()) {
        match x.total_cmp(y) {
            Ordering::Less => return true,
            Ordering::Greater => return false,
            Ordering::Equal => {}
        }
    }
    true
}

fn cost_matrix(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let bp = rows(b);
    let mut c = Array2::zeros((a.nrows(), b.nrows()));
    c.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(a.axis_iter(Axis(0)).into_par_iter())
        .for_each(|(mut row, p)| {
            let p = p.to_vec();
            for (c, q) in row.iter_mut().zip(&bp) {
                *c = sq_dist(&p, q);
            }
        });
    c
}

/// Entropic OT cost between uniform empirical measures on `a` and `b` with
/// squared-Euclidean ground cost.
///
/// `ε` is annealed from the cost scale down to `config.eps`, halving each
/// stage, with dual potentials carried over; `max_iters` and `tol` apply to
/// the final stage.
pub fn sinkhorn_w2sq(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, config: &SinkhornConfig) -> Result<SinkhornResult> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Contract("Sinkhorn needs non-empty point sets".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Contract("point sets differ in dimension".into()));
    }
    if !(config.eps > 0.0 && config.eps.is_finite()) || !(config.tol > 0.0) || config.max_iters == 0 {
        return Err(Error::Config(format!("invalid Sinkhorn config {config:?}")));
    }
    if !canonical_first(a, b) {
        return sinkhorn_w2sq(b, a, config);
    }
    let cost = cost_matrix(a, b);
    if !cost.iter().all(|c| c.is_finite()) {
        return Err(Error::Numeric("non-finite ground cost".into()));
    }
    let c_max = cost.iter().cloned().fold(0.0, f64::max);
    let mut eps_stages = Vec::new();
    let mut e = config.eps;
    while e < c_max {
        eps_stages.push(e);
        e *= 2.0;
    }
    eps_stages.push(e);
    eps_stages.reverse();

    let (n, m) = cost.dim();
    let mut f = Array1::<f64>::zeros(n);
    let mut g = Array1::<f64>::zeros(m);
    let last = eps_stages.len() - 1;
    let mut outcome = None;
    for (stage, &eps) in eps_stages.iter().enumerate() {
        let final_stage = stage == last;
        let (tol, cap) = if final_stage {
            (config.tol, config.max_iters)
        } else {
            (config.tol.max(1e-4), 500)
        };
        let res = match config.mode {
            SinkhornMode::Stabilized => scaling_stage(&cost, &mut f, &mut g, eps, tol, cap)?,
            SinkhornMode::LogDomain => log_stage(&cost, &mut f, &mut g, eps, tol, cap)?,
        };
        if final_stage {
            outcome = Some(res);
        }
    }
    let (iterations, marginal_error, converged) = outcome.expect("at least one stage");
    let eps = config.eps;
    let value: f64 = cost
        .axis_iter(Axis(0))
        .into_par_iter()
        .zip(f.as_slice().expect("contiguous").par_iter())
        .map(|(row, fi)| {
            row.iter()
                .zip(g.iter())
                .map(|(c, gj)| ((fi + gj - c) / eps).exp() * c)
                .sum::<f64>()
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    if !value.is_finite() {
        return Err(Error::Numeric(
            "Sinkhorn cost is not finite; increase eps or use the log-domain mode".into(),
        ));
    }
    Ok(SinkhornResult {
        value,
        status: if converged {
            SinkhornStatus::Converged
        } else {
            SinkhornStatus::MaxIterations
        },
        iterations,
        marginal_error,
    })
}

/// Largest `|log u|` tolerated before absorbing scalings into the potentials.
const ABSORB_LIMIT: f64 = 20.0;
/// Kernel entries below this are dropped. With scalings bounded by
/// `e^ABSORB_LIMIT` a dropped entry moves a marginal by at most ~1e-23.
const TRUNCATE_LOG: f64 = -92.0;

/// Gibbs kernel `exp((f_i + g_j - C_ij)/ε)` in compressed-row form.
struct SparseKernel {
    offsets: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    ncols: usize,
}

impl SparseKernel {
    fn new(cost: &Array2<f64>, f: &Array1<f64>, g: &Array1<f64>, eps: f64) -> Self {
        let rows: Vec<(Vec<usize>, Vec<f64>)> = cost
            .axis_iter(Axis(0))
            .into_par_iter()
            .zip(f.as_slice().expect("contiguous").par_iter())
            .map(|(row, fi)| {
                let mut cols = Vec::new();
                let mut vals = Vec::new();
                for (j, (c, gj)) in row.iter().zip(g.iter()).enumerate() {
                    let e = (fi + gj - c) / eps;
                    if e > TRUNCATE_LOG {
                        cols.push(j);
                        vals.push(e.exp());
                    }
                }
                (cols, vals)
            })
            .collect();
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        offsets.push(0);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for (c, v) in rows {
            cols.extend(c);
            vals.extend(v);
            offsets.push(cols.len());
        }
        Self { offsets, cols, vals, ncols: cost.ncols() }
    }

    fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.offsets[i]..self.offsets[i + 1];
        (&self.cols[r.clone()], &self.vals[r])
    }

    fn mul(&self, v: &Array1<f64>) -> Array1<f64> {
        (0..self.offsets.len() - 1)
            .map(|i| {
                let (c, k) = self.row(i);
                c.iter().zip(k).map(|(j, k)| k * v[*j]).sum()
            })
            .collect()
    }

    fn mul_t(&self, u: &Array1<f64>) -> Array1<f64> {
        let mut out = Array1::zeros(self.ncols);
        for (i, ui) in u.iter().enumerate() {
            let (c, k) = self.row(i);
            for (j, k) in c.iter().zip(k) {
                out[*j] += k * ui;
            }
        }
        out
    }
}

/// Scaling iterations at one `ε`. Returns `(iterations, marginal error, converged)`.
fn scaling_stage(
    cost: &Array2<f64>,
    f: &mut Array1<f64>,
    g: &mut Array1<f64>,
    eps: f64,
    tol: f64,
    cap: usize,
) -> Result<(usize, f64, bool)> {
    let (n, m) = cost.dim();
    let a = 1.0 / n as f64;
    let b = 1.0 / m as f64;
    let mut kernel = SparseKernel::new(cost, f, g, eps);
    let mut u = Array1::<f64>::ones(n);
    let mut v = Array1::<f64>::ones(m);
    let mut err = f64::INFINITY;
    for it in 0..cap {
        let kv = kernel.mul(&v);
        err = u.iter().zip(kv.iter()).map(|(u, k)| (u * k - a).abs()).sum();
        if err < tol {
            absorb(f, g, &u, &v, eps);
            return Ok((it, err, true));
        }
        u = kv.mapv(|k| a / k);
        v = kernel.mul_t(&u).mapv(|k| b / k);
        if !u.iter().chain(v.iter()).all(|x| x.is_finite() && *x > 0.0) {
            return Err(Error::Numeric(
                "Sinkhorn kernel underflowed; increase eps or use the log-domain mode".into(),
            ));
        }
        let spread = u.iter().chain(v.iter()).map(|x| x.ln().abs()).fold(0.0, f64::max);
        if spread > ABSORB_LIMIT {
            absorb(f, g, &u, &v, eps);
            u.fill(1.0);
            v.fill(1.0);
            kernel = SparseKernel::new(cost, f, g, eps);
        }
    }
    absorb(f, g, &u, &v, eps);
    Ok((cap, err, false))
}

fn absorb(f: &mut Array1<f64>, g: &mut Array1<f64>, u: &Array1<f64>, v: &Array1<f64>, eps: f64) {
    Zip::from(f).and(u).for_each(|f, u| *f += eps * u.ln());
    Zip::from(g).and(v).for_each(|g, v| *g += eps * v.ln());
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Log-sum-exp dual updates at one `ε`.
fn log_stage(
    cost: &Array2<f64>,
    f: &mut Array1<f64>,
    g: &mut Array1<f64>,
    eps: f64,
    tol: f64,
    cap: usize,
) -> Result<(usize, f64, bool)> {
    let (n, m) = cost.dim();
    let log_a = -(n as f64).ln();
    let log_b = -(m as f64).ln();
    let mut err = f64::INFINITY;
    for it in 0..cap {
        // Row marginals of the current plan.
        let row_lse: Vec<f64> = cost
            .axis_iter(Axis(0))
            .into_par_iter()
            .zip(f.as_slice().expect("contiguous").par_iter())
            .map(|(row, fi)| log_sum_exp(row.iter().zip(g.iter()).map(|(c, gj)| (fi + gj - c) / eps)))
            .collect();
        err = row_lse.iter().map(|l| (l.exp() - log_a.exp()).abs()).sum();
        if err < tol {
            return Ok((it, err, true));
        }
        for (fi, l) in f.iter_mut().zip(&row_lse) {
            *fi += eps * (log_a - l);
        }
        let fv = f.to_vec();
        let col_lse: Vec<f64> = (0..m)
            .into_par_iter()
            .map(|j| {
                let col = cost.column(j);
                log_sum_exp(col.iter().zip(&fv).map(|(c, fi)| (fi + g[j] - c) / eps))
            })
            .collect();
        for (gj, l) in g.iter_mut().zip(&col_lse) {
            *gj += eps * (log_b - l);
        }
        if !f.iter().chain(g.iter()).all(|x| x.is_finite()) {
            return Err(Error::Numeric("log-domain potentials are not finite".into()));
        }
    }
    Ok((cap, err, false))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub k: usize,
    pub eps: f64,
    pub n_real: usize,
    pub n_gen: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub density: f64,
    pub coverage: f64,
    pub w2sq: f64,
    pub config: MetricsConfig,
    pub sinkhorn: SinkhornResult,
}

/// Density, coverage and entropic W2² in one report.
pub fn evaluate(
    real: ArrayView2<'_, f64>,
    gen: ArrayView2<'_, f64>,
    k: usize,
    sinkhorn: &SinkhornConfig,
    seed: u64,
) -> Result<MetricsReport> {
    let (density, coverage) = density_coverage(real, gen, k)?;
    let ot = sinkhorn_w2sq(real, gen, sinkhorn)?;
    let report = MetricsReport {
        density,
        coverage,
        w2sq: ot.value,
        config: MetricsConfig {
            k,
            eps: sinkhorn.eps,
            n_real: real.nrows(),
            n_gen: gen.nrows(),
            seed,
        },
        sinkhorn: ot,
    };
    if !(report.density.is_finite() && report.w2sq.is_finite()) {
        return Err(Error::Numeric("metrics are not finite".into()));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{standard_normal_rows, stream_rng};
    use ndarray::{arr2, Array2};
    use proptest::prelude::*;
    use rand::Rng as _;

    /// Textbook O(n²) reference: full sorted neighbor lists.
    fn naive(real: &Array2<f64>, gen: &Array2<f64>, k: usize) -> (f64, f64) {
        let n = real.nrows();
        let mut radius = vec![0.0; n];
        for i in 0..n {
            let mut d = Vec::new();
            for j in 0..n {
                if i != j {
                    let mut s = 0.0;
                    for c in 0..real.ncols() {
                        s += (real[[i, c]] - real[[j, c]]) * (real[[i, c]] - real[[j, c]]);
                    }
                    d.push(s);
                }
            }
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            radius[i] = d[k - 1];
        }
        let mut inside = 0usize;
        let mut covered = vec![false; n];
        for g in 0..gen.nrows() {
            for i in 0..n {
                let mut s = 0.0;
                for c in 0..real.ncols() {
                    s += (gen[[g, c]] - real[[i, c]]) * (gen[[g, c]] - real[[i, c]]);
                }
                if s <= radius[i] {
                    inside += 1;
                    covered[i] = true;
                }
            }
        }
        (
            inside as f64 / (k * gen.nrows()) as f64,
            covered.iter().filter(|c| **c).count() as f64 / n as f64,
        )
    }

    fn uniform_cloud(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = stream_rng(seed, 0);
        Array2::from_shape_fn((n, 2), |_| rng.random::<f64>())
    }

    #[test]
    fn identical_sets() {
        let real = uniform_cloud(200, 1);
        let (d, c) = density_coverage(real.view(), real.view(), 5).unwrap();
        assert_eq!(c, 1.0);
        assert!(d >= 1.0);
        assert_eq!((d, c), naive(&real, &real, 5));
    }

    #[test]
    fn far_away_generation() {
        let real = uniform_cloud(100, 2);
        let gen = &real + 100.0;
        assert_eq!(density_coverage(real.view(), gen.view(), 5).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn too_few_real_points() {
        let real = uniform_cloud(5, 3);
        assert!(matches!(density_coverage(real.view(), real.view(), 5), Err(Error::Config(_))));
    }

    #[test]
    fn matches_naive_on_random_instances() {
        let mut rng = stream_rng(42, 0);
        for inst in 0..100 {
            let n_real = rng.random_range(6..300);
            let n_gen = rng.random_range(1..300);
            let real = uniform_cloud(n_real, 1000 + inst);
            // Quantized points create exact ties at the ball boundary.
            let gen = uniform_cloud(n_gen, 2000 + inst).mapv(|v| (v * 16.0).round() / 16.0);
            let real = if inst % 2 == 0 { real.mapv(|v| (v * 16.0).round() / 16.0) } else { real };
            let k = rng.random_range(1..6);
            assert_eq!(
                density_coverage(real.view(), gen.view(), k).unwrap(),
                naive(&real, &gen, k),
                "instance {inst}"
            );
        }
    }

    #[test]
    fn single_pair_transport() {
        let a = arr2(&[[0.0, 0.0]]);
        let b = arr2(&[[3.0, 4.0]]);
        let r = sinkhorn_w2sq(a.view(), b.view(), &SinkhornConfig::default()).unwrap();
        assert!((r.value - 25.0).abs() < 1e-9);
    }

    #[test]
    fn identical_clouds_have_small_entropic_cost() {
        let a = standard_normal_rows(500, 2, 4);
        let r = sinkhorn_w2sq(a.view(), a.view(), &SinkhornConfig::default()).unwrap();
        assert!(r.value < 0.05, "{}", r.value);
    }

    #[test]
    fn translation_cost() {
        let a = standard_normal_rows(500, 2, 5);
        let b = a.mapv(|v| v) + &ndarray::arr1(&[1.0, 0.0]);
        let r = sinkhorn_w2sq(a.view(), b.view(), &SinkhornConfig::default()).unwrap();
        assert!((r.value - 1.0).abs() < 0.05, "{}", r.value);
    }

    #[test]
    fn symmetric_in_arguments() {
        let a = standard_normal_rows(300, 2, 6);
        let b = uniform_cloud(300, 7);
        let cfg = SinkhornConfig::default();
        let ab = sinkhorn_w2sq(a.view(), b.view(), &cfg).unwrap().value;
        let ba = sinkhorn_w2sq(b.view(), a.view(), &cfg).unwrap().value;
        assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn both_modes_agree() {
        let a = standard_normal_rows(150, 2, 8);
        let b = uniform_cloud(150, 9) * 2.0;
        let stab = sinkhorn_w2sq(a.view(), b.view(), &SinkhornConfig::default()).unwrap();
        let log = sinkhorn_w2sq(
            a.view(),
            b.view(),
            &SinkhornConfig {
                mode: SinkhornMode::LogDomain,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((stab.value - log.value).abs() < 1e-4 * stab.value, "{} {}", stab.value, log.value);
    }

    #[test]
    fn scaling_with_matched_regularization_is_exact() {
        // Scaling the clouds by s and ε by s² scales the entropic plan's cost by s².
        let a = standard_normal_rows(200, 2, 10);
        let b = uniform_cloud(200, 11);
        let cfg = SinkhornConfig { tol: 1e-9, ..Default::default() };
        let base = sinkhorn_w2sq(a.view(), b.view(), &cfg).unwrap().value;
        let s = 3.0;
        let scaled = sinkhorn_w2sq(
            (&a * s).view(),
            (&b * s).view(),
            &SinkhornConfig { eps: cfg.eps * s * s, ..cfg },
        )
        .unwrap()
        .value;
        assert!((scaled - s * s * base).abs() < 1e-6 * scaled, "{scaled} {base}");
        // At fixed small ε the relation holds approximately.
        let fixed = sinkhorn_w2sq((&a * s).view(), (&b * s).view(), &cfg).unwrap().value;
        assert!((fixed / (s * s * base) - 1.0).abs() < 0.02, "{fixed} {base}");
    }

    #[test]
    fn iteration_cap_reports_warning() {
        let a = standard_normal_rows(100, 2, 12);
        let b = uniform_cloud(100, 13);
        let r = sinkhorn_w2sq(
            a.view(),
            b.view(),
            &SinkhornConfig {
                max_iters: 1,
                tol: 1e-14,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.status, SinkhornStatus::MaxIterations);
        assert!(r.value.is_finite());
    }

    #[test]
    fn non_finite_points_are_numeric_errors() {
        let a = arr2(&[[0.0, f64::NAN], [1.0, 1.0]]);
        let b = arr2(&[[0.0, 0.0], [1.0, 1.0]]);
        assert!(matches!(
            sinkhorn_w2sq(a.view(), b.view(), &SinkhornConfig::default()),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn report_records_configuration() {
        let real = uniform_cloud(50, 14);
        let gen = uniform_cloud(40, 15);
        let r = evaluate(real.view(), gen.view(), 5, &SinkhornConfig::default(), 9).unwrap();
        assert_eq!(r.config, MetricsConfig { k: 5, eps: 0.01, n_real: 50, n_gen: 40, seed: 9 });
        assert!((0.0..=1.0).contains(&r.coverage) && r.density >= 0.0 && r.w2sq >= 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn coverage_is_monotone_in_generated_points(seed in 0u64..1000, extra in 1usize..50) {
            let real = uniform_cloud(60, seed);
            let gen = uniform_cloud(30 + extra, seed + 1);
            let (_, c_small) = density_coverage(real.view(), gen.slice(ndarray::s![..30, ..]), 5).unwrap();
            let (_, c_big) = density_coverage(real.view(), gen.view(), 5).unwrap();
            prop_assert!(c_big >= c_small);
        }
    }
}
