//! Offline sharpness calibration.
//!
//! Fine Euler reference trajectories are integrated in reverse time while
//! their velocities are recorded. Consecutive velocities give finite-difference
//! accelerations whose averaged norms, after power shaping and Gaussian
//! smoothing, become a probability mass over interior grid midpoints.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Convention, VelocityField};
use crate::grid::Grid;
use crate::rng::{derive_seed, standard_normal_rows};

/// Trajectories integrated together as one batch. Fixed so results do not
/// depend on the thread count.
const TRAJECTORY_CHUNK: usize = 32;

pub const PROFILE_VERSION: u32 = 1;
const TRACE_FORMAT: &str = "sharpeuler-trace";

/// Recorded velocities `V[j, i] = field(x_j at step i, s_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityTrace {
    grid: Grid,
    convention: Convention,
    velocities: Array3<f64>,
    conditioning_ids: Option<Vec<String>>,
}

impl VelocityTrace {
    pub fn new(
        grid: Grid,
        convention: Convention,
        velocities: Array3<f64>,
        conditioning_ids: Option<Vec<String>>,
    ) -> Result<Self> {
        let (m, n, _) = velocities.dim();
        if n != grid.intervals() {
            return Err(Error::Contract(format!(
                "trace has {n} steps but the grid has {} intervals",
                grid.intervals()
            )));
        }
        if m == 0 {
            return Err(Error::Contract("trace needs at least one trajectory".into()));
        }
        if let Some(ids) = &conditioning_ids {
            if ids.len() != m {
                return Err(Error::Contract(format!(
                    "{} conditioning ids for {m} trajectories",
                    ids.len()
                )));
            }
        }
        if !velocities.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("trace velocities must be finite".into()));
        }
        Ok(Self {
            grid,
            convention,
            velocities,
            conditioning_ids,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn convention(&self) -> Convention {
        self.convention
    }

    /// `M × N × d` velocity tensor.
    pub fn velocities(&self) -> &Array3<f64> {
        &self.velocities
    }

    pub fn conditioning_ids(&self) -> Option<&[String]> {
        self.conditioning_ids.as_deref()
    }

    pub fn trajectories(&self) -> usize {
        self.velocities.dim().0
    }

    /// Writes a one-line JSON header followed by little-endian `f64` data in
    /// `[trajectory][step][coordinate]` order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = TraceHeader {
            format: TRACE_FORMAT.into(),
            version: 1,
            dtype: "f64".into(),
            endianness: "little".into(),
            shape: self.velocities.shape().to_vec(),
            convention: self.convention,
            grid: self.grid.knots().to_vec(),
            conditioning_ids: self.conditioning_ids.clone(),
        };
        let mut bytes = serde_json::to_vec(&header)?;
        bytes.push(b'\n');
        bytes.reserve(self.velocities.len() * 8);
        for v in self.velocities.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);
        let mut line = String::new();
        reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        let header: TraceHeader = serde_json::from_str(line.trim_end())?;
        if header.format != TRACE_FORMAT
            || header.version != 1
            || header.dtype != "f64"
            || header.endianness != "little"
            || header.shape.len() != 3
        {
            return Err(Error::Config(format!(
                "unsupported trace header in {}",
                path.display()
            )));
        }
        let len: usize = header.shape.iter().product();
        let mut raw = vec![0u8; len * 8];
        reader.read_exact(&mut raw).map_err(|e| Error::io(path, e))?;
        let mut rest = Vec::new();
        reader.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
        if !rest.is_empty() {
            return Err(Error::Config(format!(
                "{} trailing bytes after trace data",
                rest.len()
            )));
        }
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let shape = (header.shape[0], header.shape[1], header.shape[2]);
        let velocities = Array3::from_shape_vec(shape, data).expect("length checked");
        Self::new(
            Grid::from_knots(header.grid)?,
            header.convention,
            velocities,
            header.conditioning_ids,
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceHeader {
    format: String,
    version: u32,
    dtype: String,
    endianness: String,
    shape: Vec<usize>,
    convention: Convention,
    grid: Vec<f64>,
    conditioning_ids: Option<Vec<String>>,
}

/// Integrates `M` reference trajectories from `N(0, I)` starts drawn from
/// `seed`, recording reverse-time velocities.
///
/// Trajectory `j` always starts from the same point for a given seed, so a
/// run with `M` trajectories is a prefix of a run with more.
pub fn run_reference_trajectories(
    field: &dyn VelocityField,
    grid: &Grid,
    trajectories: usize,
    seed: u64,
) -> Result<VelocityTrace> {
    if trajectories == 0 {
        return Err(Error::Contract("at least one calibration trajectory is required".into()));
    }
    let starts = standard_normal_rows(trajectories, field.dim(), derive_seed(seed, "calibration"));
    run_reference_trajectories_from(field, grid, starts.view(), Convention::Reverse)
}

/// Integrates from explicit starting states and records velocities in the
/// requested convention. The integration itself always follows
/// `x ← x - (s_i - s_{i+1}) v(x, s_i)`.
pub fn run_reference_trajectories_from(
    field: &dyn VelocityField,
    grid: &Grid,
    starts: ArrayView2<'_, f64>,
    record: Convention,
) -> Result<VelocityTrace> {
    let (m, d) = starts.dim();
    if m == 0 {
        return Err(Error::Contract("at least one calibration trajectory is required".into()));
    }
    if d != field.dim() {
        return Err(Error::Contract(format!(
            "starting states have dimension {d}, field has {}",
            field.dim()
        )));
    }
    let knots = grid.knots();
    let n = grid.intervals();
    let chunks: Vec<(usize, ArrayView2<'_, f64>)> = starts
        .axis_chunks_iter(Axis(0), TRAJECTORY_CHUNK)
        .enumerate()
        .map(|(c, view)| (c * TRAJECTORY_CHUNK, view))
        .collect();
    let parts: Vec<Result<Array3<f64>>> = chunks
        .into_par_iter()
        .map(|(offset, init)| {
            let rows = init.nrows();
            let mut x = init.to_owned();
            let mut rec = Array3::zeros((rows, n, d));
            for i in 0..n {
                let v = field.evaluate_batch(x.view(), knots[i], Convention::Reverse);
                let h = knots[i] - knots[i + 1];
                x.scaled_add(-h, &v);
                let sign = if record == Convention::Reverse { 1.0 } else { -1.0 };
                rec.index_axis_mut(Axis(1), i).assign(&(&v * sign));
                if let Some(bad) = x.rows().into_iter().position(|r| !r.iter().all(|v| v.is_finite())) {
                    return Err(Error::TrajectoryBlowup {
                        trajectory: offset + bad,
                        step: i,
                    });
                }
                if !v.iter().all(|v| v.is_finite()) {
                    let bad = v.rows().into_iter().position(|r| !r.iter().all(|v| v.is_finite()));
                    return Err(Error::TrajectoryBlowup {
                        trajectory: offset + bad.unwrap_or(0),
                        step: i,
                    });
                }
            }
            Ok(rec)
        })
        .collect();
    let mut velocities = Array3::zeros((m, n, d));
    let mut row = 0;
    for part in parts {
        let part = part?;
        let len = part.dim().0;
        velocities
            .slice_mut(ndarray::s![row..row + len, .., ..])
            .assign(&part);
        row += len;
    }
    VelocityTrace::new(grid.clone(), record, velocities, None)
}

/// Central spacings `d_i = (s_i - s_{i+2}) / 2` for `i = 0..N-1`.
pub fn central_spacings(knots: &[f64]) -> Result<Vec<f64>> {
    if knots.len() < 3 {
        return Err(Error::Contract(format!(
            "finite differences need N >= 2 intervals, got {}",
            knots.len().saturating_sub(1)
        )));
    }
    knots
        .windows(3)
        .enumerate()
        .map(|(i, w)| {
            if !(w[0] > w[1] && w[1] > w[2]) {
                return Err(Error::Contract(format!(
                    "grid is not strictly descending around knot {}",
                    i + 1
                )));
            }
            let d = (w[0] - w[2]) / 2.0;
            if d > 0.0 {
                Ok(d)
            } else {
                Err(Error::Contract(format!("non-positive spacing d_{i} = {d}")))
            }
        })
        .collect()
}

/// Norms `‖(V[j, i+1] - V[j, i]) / d_i‖` over raw knots and an `M × N × d`
/// velocity tensor.
pub fn finite_difference_norms(knots: &[f64], velocities: &Array3<f64>) -> Result<Array2<f64>> {
    let spacings = central_spacings(knots)?;
    let (m, n, _) = velocities.dim();
    if n != knots.len() - 1 {
        return Err(Error::Contract(format!(
            "{n} recorded steps for {} intervals",
            knots.len() - 1
        )));
    }
    let mut out = Array2::zeros((m, n - 1));
    for j in 0..m {
        for (i, d) in spacings.iter().enumerate() {
            let a = velocities.slice(ndarray::s![j, i, ..]);
            let b = velocities.slice(ndarray::s![j, i + 1, ..]);
            let sq: f64 = a.iter().zip(b.iter()).map(|(a, b)| ((b - a) / d).powi(2)).sum();
            out[[j, i]] = sq.sqrt();
        }
    }
    Ok(out)
}

/// Per-trajectory acceleration norms, `M × (N - 1)`.
pub fn finite_difference_accel(trace: &VelocityTrace) -> Result<Array2<f64>> {
    finite_difference_norms(trace.grid.knots(), &trace.velocities)
}

/// Column means of the norm matrix, summed in trajectory order.
pub fn average_profile(norms: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    let m = norms.nrows();
    if m == 0 {
        return Err(Error::Contract("cannot average zero trajectories".into()));
    }
    Ok(norms
        .columns()
        .into_iter()
        .map(|col| col.iter().sum::<f64>() / m as f64)
        .collect())
}

/// Shaping and smoothing parameters of a profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeParams {
    pub gamma: f64,
    pub sigma: f64,
    pub eps_a: f64,
}

impl Default for ShapeParams {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            sigma: 1.0,
            eps_a: 1e-8,
        }
    }
}

impl ShapeParams {
    pub fn with_gamma(self, gamma: f64) -> Self {
        Self { gamma, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.eps_a >= 0.0 && self.eps_a.is_finite()) {
            return Err(Error::Config(format!("eps_a must be >= 0, got {}", self.eps_a)));
        }
        Ok(())
    }
}

/// Normalized Gaussian kernel `K_{-r..=r}` with `r = max(1, ⌊3σ⌋)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = ((3.0 * sigma).floor() as usize).max(1) as i64;
    let raw: Vec<f64> = (-r..=r)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|k| k / total).collect()
}

/// Index `i` folded into `0..len` by mirroring about the end samples
/// without repeating them (`x[-1] = x[1]`), bouncing as often as needed.
fn reflect_index(i: i64, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as i64 - 1);
    let m = i.rem_euclid(period);
    if m < len as i64 {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Gaussian smoothing in index space with reflect padding.
pub fn smooth(values: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as i64;
    let len = values.len();
    Ok((0..len as i64)
        .map(|i| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * values[reflect_index(i + k as i64 - r, len)])
                .sum()
        })
        .collect())
}

/// `Smooth_σ((raw + ε_a)^γ)`.
pub fn shape_and_smooth(raw: &[f64], params: &ShapeParams) -> Result<Vec<f64>> {
    params.validate()?;
    if let Some(v) = raw.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Contract(format!("raw profile entries must be finite and >= 0, got {v}")));
    }
    let shaped: Vec<f64> = raw.iter().map(|a| (a + params.eps_a).powf(params.gamma)).collect();
    smooth(&shaped, params.sigma)
}

/// Forward-time midpoints `t̃_i = 1 - (s_i + s_{i+2}) / 2`.
pub fn forward_midpoints(grid: &Grid) -> Vec<f64> {
    grid.knots()
        .windows(3)
        .map(|w| 1.0 - (w[0] + w[2]) / 2.0)
        .collect()
}

/// Masses `shaped_i / Σ shaped` on the grid's forward-time midpoints.
pub fn normalize_masses(shaped: &[f64], grid: &Grid) -> Result<(Vec<f64>, Vec<f64>)> {
    if shaped.len() + 2 != grid.knots().len() {
        return Err(Error::Contract(format!(
            "{} shaped values for a grid with {} intervals",
            shaped.len(),
            grid.intervals()
        )));
    }
    if shaped.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Contract("shaped values must be >= 0".into()));
    }
    let total: f64 = shaped.iter().sum();
    if total == 0.0 {
        return Err(Error::DegenerateProfile);
    }
    if !total.is_finite() {
        return Err(Error::Numeric("shaped profile sum is not finite".into()));
    }
    let masses = shaped.iter().map(|v| v / total).collect();
    Ok((forward_midpoints(grid), masses))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileMeta {
    pub gamma: f64,
    pub sigma: f64,
    pub eps_a: f64,
    #[serde(rename = "M")]
    pub trajectories: usize,
    #[serde(rename = "N")]
    pub intervals: usize,
}

/// Normalized sharpness masses on forward-time midpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharpnessProfile {
    pub version: u32,
    pub meta: ProfileMeta,
    pub grid: Grid,
    pub midpoints: Vec<f64>,
    pub raw_profile: Vec<f64>,
    pub masses: Vec<f64>,
}

impl SharpnessProfile {
    /// Shapes, smooths and normalizes an averaged raw profile.
    pub fn from_raw(grid: &Grid, raw: Vec<f64>, trajectories: usize, params: &ShapeParams) -> Result<Self> {
        let shaped = shape_and_smooth(&raw, params)?;
        let (midpoints, masses) = normalize_masses(&shaped, grid)?;
        let profile = Self {
            version: PROFILE_VERSION,
            meta: ProfileMeta {
                gamma: params.gamma,
                sigma: params.sigma,
                eps_a: params.eps_a,
                trajectories,
                intervals: grid.intervals(),
            },
            grid: grid.clone(),
            midpoints,
            raw_profile: raw,
            masses,
        };
        profile.validate()?;
        Ok(profile)
    }

    /// Same raw profile under different shaping parameters.
    pub fn reshaped(&self, params: &ShapeParams) -> Result<Self> {
        Self::from_raw(&self.grid, self.raw_profile.clone(), self.meta.trajectories, params)
    }

    pub fn shape_params(&self) -> ShapeParams {
        ShapeParams {
            gamma: self.meta.gamma,
            sigma: self.meta.sigma,
            eps_a: self.meta.eps_a,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.grid.intervals();
        let bad = |msg: String| Err(Error::Contract(msg));
        if self.version != PROFILE_VERSION {
            return Err(Error::Config(format!("unsupported profile version {}", self.version)));
        }
        if n < 2 || self.meta.intervals != n {
            return bad(format!("profile grid has {n} intervals, meta says {}", self.meta.intervals));
        }
        if self.midpoints.len() != n - 1 || self.masses.len() != n - 1 || self.raw_profile.len() != n - 1 {
            return bad(format!("profile vectors must have length {}", n - 1));
        }
        if self.masses.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
            return bad("masses must be finite and nonnegative".into());
        }
        let total: f64 = self.masses.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return bad(format!("masses sum to {total}, not 1"));
        }
        let ascending = self.midpoints.windows(2).all(|w| w[0] < w[1]);
        let inside = self.midpoints.iter().all(|t| *t > 0.0 && *t < 1.0);
        if !ascending || !inside {
            return bad("midpoints must be strictly ascending inside (0, 1)".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let profile: Self = serde_json::from_str(text)?;
        profile.validate()?;
        Ok(profile)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn require_positive_floor(params: &ShapeParams) -> Result<()> {
    if params.eps_a > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "calibration requires eps_a > 0 to keep masses non-degenerate, got {}",
            params.eps_a
        )))
    }
}

/// Profile from an existing trace.
pub fn calibrate_from_trace(trace: &VelocityTrace, params: &ShapeParams) -> Result<SharpnessProfile> {
    require_positive_floor(params)?;
    let norms = finite_difference_accel(trace)?;
    let raw = average_profile(norms.view())?;
    SharpnessProfile::from_raw(trace.grid(), raw, trace.trajectories(), params)
}

/// Trajectories, finite differences, averaging, shaping and normalization.
pub fn calibrate(
    field: &dyn VelocityField,
    grid: &Grid,
    trajectories: usize,
    params: &ShapeParams,
    seed: u64,
) -> Result<SharpnessProfile> {
    require_positive_floor(params)?;
    let trace = run_reference_trajectories(field, grid, trajectories, seed)?;
    calibrate_from_trace(&trace, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::ClosedFormFlow;
    use crate::tinyflow::analytic_field;
    use ndarray::{arr2, Array3};
    use proptest::prelude::*;

    #[test]
    fn constant_field_trace() {
        let f = analytic_field("constant:0.5,-1").unwrap();
        let grid = Grid::from_knots(vec![1.0, 0.7, 0.2, 0.0]).unwrap();
        let starts = arr2(&[[0.0, 0.0], [1.0, 2.0]]);
        let trace = run_reference_trajectories_from(&f, &grid, starts.view(), Convention::Reverse).unwrap();
        // v(x, s) = -u(x, 1 - s) = -c.
        assert!(trace.velocities().iter().zip([-0.5, 1.0].iter().cycle()).all(|(a, b)| a == b));
        // x_N = x_0 - Σ gaps · (-c) = x_0 + c: the forward flow over unit time.
        let norms = finite_difference_accel(&trace).unwrap();
        assert!(norms.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn constant_field_terminal_state() {
        // Integrate by hand alongside to check the recursion.
        let f = analytic_field("constant:2,3").unwrap();
        let grid = Grid::uniform(7).unwrap();
        let mut x = [0.25, -0.5];
        for w in grid.knots().windows(2) {
            let v = f.evaluate(&x, w[0], Convention::Reverse);
            x[0] -= (w[0] - w[1]) * v[0];
            x[1] -= (w[0] - w[1]) * v[1];
        }
        assert!((x[0] - 2.25).abs() < 1e-14 && (x[1] - 2.5).abs() < 1e-14);
    }

    #[test]
    fn linear_field_terminal_state_matches_flow() {
        let f = analytic_field("linear:0.3,-0.8,0.6,0.1").unwrap();
        let grid = Grid::uniform(1000).unwrap();
        let starts = standard_normal_rows(3, 2, 9);
        let trace = run_reference_trajectories_from(&f, &grid, starts.view(), Convention::Reverse).unwrap();
        for j in 0..3 {
            let mut x = starts.row(j).to_vec();
            for (i, w) in grid.knots().windows(2).enumerate() {
                for k in 0..2 {
                    x[k] -= (w[0] - w[1]) * trace.velocities()[[j, i, k]];
                }
            }
            let exact = f.flow(&starts.row(j).to_vec(), 0.0, 1.0);
            for k in 0..2 {
                assert!((x[k] - exact[k]).abs() < 1e-2);
            }
        }
    }

    #[test]
    fn identical_starts_give_identical_rows() {
        let f = analytic_field("bump:0.5,0.1,1,0.3").unwrap();
        let grid = Grid::uniform(50).unwrap();
        let starts = arr2(&[[0.3, -0.2], [0.3, -0.2]]);
        let trace = run_reference_trajectories_from(&f, &grid, starts.view(), Convention::Reverse).unwrap();
        let v = trace.velocities();
        assert_eq!(v.index_axis(Axis(0), 0), v.index_axis(Axis(0), 1));
    }

    #[test]
    fn seeded_runs_are_prefix_stable_and_reproducible() {
        let f = analytic_field("bump:0.5,0.1,1,0.3").unwrap();
        let grid = Grid::uniform(20).unwrap();
        let a = run_reference_trajectories(&f, &grid, 5, 3).unwrap();
        let b = run_reference_trajectories(&f, &grid, 70, 3).unwrap();
        assert_eq!(a.velocities(), &b.velocities().slice(ndarray::s![..5, .., ..]));
        assert_eq!(a, run_reference_trajectories(&f, &grid, 5, 3).unwrap());
    }

    #[test]
    fn blowup_reports_trajectory_and_step() {
        let f = analytic_field("linear:1e200,0,0,1e200").unwrap();
        let grid = Grid::uniform(4).unwrap();
        let starts = arr2(&[[0.0, 0.0], [1.0, 1.0]]);
        match run_reference_trajectories_from(&f, &grid, starts.view(), Convention::Reverse) {
            Err(Error::TrajectoryBlowup { trajectory, step }) => {
                assert_eq!(trajectory, 1);
                assert!(step < 4);
            }
            other => panic!("expected blowup, got {other:?}"),
        }
    }

    #[test]
    fn uniform_spacings() {
        let grid = Grid::uniform(10).unwrap();
        for d in central_spacings(grid.knots()).unwrap() {
            assert!((d - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn single_difference_norm() {
        let knots = [0.3, 0.2, 0.1];
        let mut v = Array3::zeros((1, 2, 2));
        v[[0, 1, 0]] = 1.0;
        let norms = finite_difference_norms(&knots, &v).unwrap();
        assert!((norms[[0, 0]] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn nonmonotone_knots_rejected() {
        let v = Array3::zeros((1, 3, 2));
        assert!(matches!(
            finite_difference_norms(&[1.0, 0.4, 0.6, 0.0], &v),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            finite_difference_norms(&[1.0, 0.0], &Array3::zeros((1, 1, 2))),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn averaging_examples() {
        let one = arr2(&[[1.5, 0.0, 2.0]]);
        assert_eq!(average_profile(one.view()).unwrap(), vec![1.5, 0.0, 2.0]);
        let two = arr2(&[[1.0, 3.0], [3.0, 1.0]]);
        assert_eq!(average_profile(two.view()).unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn averaging_matches_double_loop() {
        let m = standard_normal_rows(5, 7, 1).mapv(f64::abs);
        let got = average_profile(m.view()).unwrap();
        for i in 0..7 {
            let mut s = 0.0;
            for j in 0..5 {
                s += m[[j, i]];
            }
            assert!((got[i] - s / 5.0).abs() < 1e-14);
        }
    }

    #[test]
    fn kernel_for_unit_sigma() {
        let k = gaussian_kernel(1.0);
        assert_eq!(k.len(), 7);
        let raw: Vec<f64> = (-3..=3).map(|k: i32| (-(k * k) as f64 / 2.0).exp()).collect();
        let total: f64 = raw.iter().sum();
        for (a, b) in k.iter().zip(&raw) {
            assert!((a - b / total).abs() < 1e-15);
        }
        // Small bandwidths still use a radius of one.
        assert_eq!(gaussian_kernel(0.2).len(), 3);
    }

    #[test]
    fn impulse_spreads_with_kernel_weights() {
        let mut x = vec![0.0; 21];
        x[10] = 1.0;
        let y = smooth(&x, 1.0).unwrap();
        let k = gaussian_kernel(1.0);
        for (off, w) in k.iter().enumerate() {
            assert!((y[7 + off] - w).abs() < 1e-15);
        }
        assert!(y[..7].iter().chain(&y[14..]).all(|v| *v == 0.0));
    }

    #[test]
    fn short_input_hand_expansion() {
        // [0, 1, 0] mirrored without repeating edges, bouncing as needed:
        // index:  -3 -2 -1 | 0 1 2 | 3 4 5
        // value:   1  0  1 | 0 1 0 | 1 0 1
        let k = gaussian_kernel(1.0);
        let ext = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let want: Vec<f64> = (0..3)
            .map(|i| (0..7).map(|o| k[o] * ext[i + o]).sum())
            .collect();
        let got = smooth(&[0.0, 1.0, 0.0], 1.0).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_input_is_preserved() {
        let p = ShapeParams { gamma: 1.0, sigma: 2.5, eps_a: 0.0 };
        for len in [1, 2, 5, 40] {
            let y = shape_and_smooth(&vec![3.0; len], &p).unwrap();
            assert!(y.iter().all(|v| (v - 3.0).abs() < 1e-14), "{len}: {y:?}");
        }
    }

    #[test]
    fn bad_shape_params() {
        let raw = [1.0, 2.0];
        for p in [
            ShapeParams { sigma: 0.0, ..Default::default() },
            ShapeParams { sigma: -1.0, ..Default::default() },
            ShapeParams { gamma: 0.0, ..Default::default() },
        ] {
            assert!(matches!(shape_and_smooth(&raw, &p), Err(Error::Config(_))));
        }
    }

    #[test]
    fn mass_normalization_examples() {
        let g5 = Grid::uniform(5).unwrap();
        let (_, m) = normalize_masses(&[1.0; 4], &g5).unwrap();
        assert_eq!(m, vec![0.25; 4]);
        let g4 = Grid::uniform(4).unwrap();
        let (mid, m) = normalize_masses(&[2.0, 0.0, 0.0], &g4).unwrap();
        assert_eq!(m, vec![1.0, 0.0, 0.0]);
        assert_eq!(mid, vec![0.25, 0.5, 0.75]);
        assert!(matches!(normalize_masses(&[0.0; 3], &g4), Err(Error::DegenerateProfile)));
    }

    #[test]
    fn constant_field_calibrates_to_uniform_masses() {
        let f = analytic_field("constant:1,1").unwrap();
        let grid = Grid::uniform(50).unwrap();
        let p = calibrate(&f, &grid, 4, &ShapeParams::default(), 0).unwrap();
        assert!(p.raw_profile.iter().all(|v| *v == 0.0));
        let u = 1.0 / 49.0;
        assert!(p.masses.iter().all(|m| (m - u).abs() < 1e-12));
        let zero_floor = ShapeParams { eps_a: 0.0, ..Default::default() };
        assert!(matches!(calibrate(&f, &grid, 4, &zero_floor, 0), Err(Error::Config(_))));
    }

    #[test]
    fn bump_profile_peaks_at_center() {
        let f = analytic_field("bump:0.8,0.05").unwrap();
        let p = calibrate(&f, &Grid::uniform(200).unwrap(), 16, &ShapeParams::default(), 1).unwrap();
        let (i, _) = p
            .masses
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        assert!((p.midpoints[i] - 0.8).abs() <= 0.05);
    }

    #[test]
    fn larger_gamma_sharpens_masses() {
        let f = analytic_field("bump:0.6,0.08,1,0.2").unwrap();
        let trace = run_reference_trajectories(&f, &Grid::uniform(100).unwrap(), 8, 2).unwrap();
        let ratio = |g: f64| {
            let p = calibrate_from_trace(&trace, &ShapeParams::default().with_gamma(g)).unwrap();
            let max = p.masses.iter().cloned().fold(0.0, f64::max);
            let min = p.masses.iter().cloned().fold(f64::INFINITY, f64::min);
            max / min
        };
        assert!(ratio(2.0) > ratio(0.5));
    }

    #[test]
    fn recording_convention_does_not_change_norms() {
        let f = analytic_field("bump:0.4,0.1,2,0.5").unwrap();
        let grid = Grid::uniform(60).unwrap();
        let starts = standard_normal_rows(6, 2, 5);
        let rev = run_reference_trajectories_from(&f, &grid, starts.view(), Convention::Reverse).unwrap();
        let fwd = run_reference_trajectories_from(&f, &grid, starts.view(), Convention::Forward).unwrap();
        assert_eq!(fwd.velocities(), &rev.velocities().mapv(|v| -v));
        assert_eq!(finite_difference_accel(&rev).unwrap(), finite_difference_accel(&fwd).unwrap());
    }

    /// Error of the averaged finite-difference profile against the exact
    /// acceleration norm at each midpoint.
    fn fd_error(n: usize) -> f64 {
        let f = analytic_field("time-quadratic:0.5,0,0,1,1,-1").unwrap();
        let grid = Grid::uniform(n).unwrap();
        let starts = standard_normal_rows(4, 2, 8);
        let trace = run_reference_trajectories_from(&f, &grid, starts.view(), Convention::Reverse).unwrap();
        let raw = average_profile(finite_difference_accel(&trace).unwrap().view()).unwrap();
        forward_midpoints(&grid)
            .iter()
            .zip(&raw)
            .map(|(t, r)| (r - f.acceleration_norm(&[0.0, 0.0], *t)).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn finite_differences_converge_at_first_order() {
        let (e250, e500, e1000) = (fd_error(250), fd_error(500), fd_error(1000));
        for ratio in [e250 / e500, e500 / e1000] {
            assert!((1.5..=2.5).contains(&ratio), "{e250} {e500} {e1000}");
        }
    }

    #[test]
    fn profile_json_round_trip_and_layout() {
        let f = analytic_field("bump:0.3,0.1").unwrap();
        let p = calibrate(&f, &Grid::uniform(12).unwrap(), 3, &ShapeParams::default(), 4).unwrap();
        let text = p.to_json().unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["version", "meta", "grid", "midpoints", "raw_profile", "masses"] {
            assert!(value.get(key).is_some(), "{key}");
        }
        for key in ["gamma", "sigma", "eps_a", "M", "N"] {
            assert!(value["meta"].get(key).is_some(), "{key}");
        }
        assert_eq!(SharpnessProfile::from_json(&text).unwrap(), p);
    }

    #[test]
    fn trace_binary_round_trip() {
        let f = analytic_field("bump:0.3,0.1,1,0.4").unwrap();
        let mut trace = run_reference_trajectories(&f, &Grid::uniform(9).unwrap(), 3, 4).unwrap();
        trace.conditioning_ids = Some(vec!["a".into(), "b".into(), "c".into()]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.bin");
        trace.save(&path).unwrap();
        assert_eq!(VelocityTrace::load(&path).unwrap(), trace);
    }

    proptest! {
        #[test]
        fn smoothing_is_linear_and_positive(
            a in proptest::collection::vec(0.0..10.0f64, 1..30),
            c in 0.0..5.0f64,
            sigma in 0.3..4.0f64,
        ) {
            let b: Vec<f64> = a.iter().rev().cloned().collect();
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + c * y).collect();
            let (sa, sb, ss) = (smooth(&a, sigma).unwrap(), smooth(&b, sigma).unwrap(), smooth(&sum, sigma).unwrap());
            for i in 0..a.len() {
                prop_assert!((ss[i] - (sa[i] + c * sb[i])).abs() < 1e-10);
                prop_assert!(sa[i] >= 0.0);
            }
        }

        #[test]
        fn profile_invariants(
            raw in proptest::collection::vec(0.0..5.0f64, 2..60),
            gamma in 0.1..3.0f64,
            sigma in 0.2..3.0f64,
        ) {
            let grid = Grid::uniform(raw.len() + 1).unwrap();
            let p = SharpnessProfile::from_raw(&grid, raw, 1, &ShapeParams { gamma, sigma, eps_a: 1e-8 }).unwrap();
            prop_assert!(p.validate().is_ok());
        }
    }
}
