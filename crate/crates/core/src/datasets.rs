//! Two-dimensional synthetic targets and the Gaussian base distribution.
//!
//! Geometry is fixed here so that every run trains on the same targets:
//!
//! * **branched-manifold**: a Y-shaped tree of three quadratic Bézier arcs,
//!   sampled uniformly in arc length, plus isotropic noise (σ = 0.02).
//! * **rotated-grid**: a K×K lattice spanning `[-extent, extent]²` with an
//!   isotropic Gaussian (σ = 0.05) at every node, rotated as a whole by
//!   `rotation_deg` (defaults K = 5, extent 1.5, 30°).
//! * **spiral**: a two-turn Archimedean spiral `r = aθ` reaching radius 1.8,
//!   with noise σ = 0.02.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{standard_normal_rows, stream_rng, Rng};

/// Dimension of every synthetic target.
pub const DATA_DIM: usize = 2;

type Point = [f64; 2];

/// Quadratic Bézier control points `(P0, P1, P2)` of the branched manifold.
const BRANCH_ARCS: [[Point; 3]; 3] = [
    // trunk
    [[0.0, -1.6], [0.35, -0.8], [0.0, 0.0]],
    // left branch
    [[0.0, 0.0], [-0.2, 1.0], [-1.4, 1.4]],
    // right branch
    [[0.0, 0.0], [0.9, 0.3], [1.5, 1.2]],
];

const ARC_TABLE_SEGMENTS: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Dataset {
    BranchedManifold {
        #[serde(default = "default_curve_noise")]
        noise: f64,
    },
    RotatedGrid {
        #[serde(default = "default_grid_k")]
        k: usize,
        #[serde(default = "default_grid_sigma")]
        sigma: f64,
        #[serde(default = "default_grid_rotation")]
        rotation_deg: f64,
        #[serde(default = "default_grid_extent")]
        extent: f64,
    },
    Spiral {
        #[serde(default = "default_spiral_turns")]
        turns: f64,
        #[serde(default = "default_curve_noise")]
        noise: f64,
        #[serde(default = "default_spiral_radius")]
        max_radius: f64,
    },
}

fn default_curve_noise() -> f64 {
    0.02
}
fn default_grid_k() -> usize {
    5
}
fn default_grid_sigma() -> f64 {
    0.05
}
fn default_grid_rotation() -> f64 {
    30.0
}
fn default_grid_extent() -> f64 {
    1.5
}
fn default_spiral_turns() -> f64 {
    2.0
}
fn default_spiral_radius() -> f64 {
    1.8
}

impl Dataset {
    pub fn branched_manifold() -> Self {
        Dataset::BranchedManifold {
            noise: default_curve_noise(),
        }
    }

    pub fn rotated_grid() -> Self {
        Dataset::RotatedGrid {
            k: default_grid_k(),
            sigma: default_grid_sigma(),
            rotation_deg: default_grid_rotation(),
            extent: default_grid_extent(),
        }
    }

    pub fn spiral() -> Self {
        Dataset::Spiral {
            turns: default_spiral_turns(),
            noise: default_curve_noise(),
            max_radius: default_spiral_radius(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Dataset::BranchedManifold { .. } => "branched-manifold",
            Dataset::RotatedGrid { .. } => "rotated-grid",
            Dataset::Spiral { .. } => "spiral",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match *self {
            Dataset::BranchedManifold { noise } if !(noise >= 0.0 && noise.is_finite()) => {
                bad(format!("branched-manifold noise must be >= 0, got {noise}"))
            }
            Dataset::RotatedGrid {
                k,
                sigma,
                rotation_deg,
                extent,
            } => {
                if k == 0 {
                    bad("rotated-grid needs k >= 1".into())
                } else if !(sigma >= 0.0 && sigma.is_finite()) {
                    bad(format!("rotated-grid sigma must be >= 0, got {sigma}"))
                } else if !(extent > 0.0 && extent.is_finite()) || !rotation_deg.is_finite() {
                    bad("rotated-grid extent must be positive and rotation finite".into())
                } else {
                    Ok(())
                }
            }
            Dataset::Spiral {
                turns,
                noise,
                max_radius,
            } => {
                if !(turns > 0.0 && max_radius > 0.0 && noise >= 0.0)
                    || !(turns.is_finite() && max_radius.is_finite() && noise.is_finite())
                {
                    bad(format!(
                        "spiral needs turns > 0, max_radius > 0, noise >= 0 (got {turns}, {max_radius}, {noise})"
                    ))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// Draws `n` points from an explicit random stream.
    pub fn sample_with(&self, rng: &mut Rng, n: usize) -> Array2<f64> {
        let mut out = Array2::zeros((n, DATA_DIM));
        match *self {
            Dataset::BranchedManifold { noise } => {
                let table = ArcTable::new(&BRANCH_ARCS);
                for mut row in out.rows_mut() {
                    let p = table.sample(rng);
                    row[0] = p[0] + noise * normal(rng);
                    row[1] = p[1] + noise * normal(rng);
                }
            }
            Dataset::RotatedGrid {
                k,
                sigma,
                rotation_deg,
                extent,
            } => {
                let (sin, cos) = rotation_deg.to_radians().sin_cos();
                let node = |i: usize| {
                    if k == 1 {
                        0.0
                    } else {
                        -extent + 2.0 * extent * i as f64 / (k - 1) as f64
                    }
                };
                for mut row in out.rows_mut() {
                    let cell = rng.random_range(0..k * k);
                    let x = node(cell % k) + sigma * normal(rng);
                    let y = node(cell / k) + sigma * normal(rng);
                    row[0] = cos * x - sin * y;
                    row[1] = sin * x + cos * y;
                }
            }
            Dataset::Spiral {
                turns,
                noise,
                max_radius,
            } => {
                let theta_max = std::f64::consts::TAU * turns;
                let a = max_radius / theta_max;
                for mut row in out.rows_mut() {
                    // Arc length of r = aθ grows like θ², so √u is close to
                    // arc-length uniform.
                    let theta = theta_max * rng.random::<f64>().sqrt();
                    let (s, c) = theta.sin_cos();
                    row[0] = a * theta * c + noise * normal(rng);
                    row[1] = a * theta * s + noise * normal(rng);
                }
            }
        }
        out
    }
}

impl FromStr for Dataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "branched-manifold" => Ok(Self::branched_manifold()),
            "rotated-grid" => Ok(Self::rotated_grid()),
            "spiral" => Ok(Self::spiral()),
            other => Err(Error::Config(format!(
                "unknown dataset `{other}` (expected branched-manifold, rotated-grid or spiral)"
            ))),
        }
    }
}

/// A dataset together with the seed that makes its draws reproducible.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub dataset: Dataset,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(dataset: Dataset, seed: u64) -> Self {
        Self { dataset, seed }
    }
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `n` i.i.d. draws from the target, deterministic in `spec.seed`.
pub fn sample(spec: &DatasetSpec, n: usize) -> Result<Array2<f64>> {
    if n == 0 {
        return Err(Error::Contract("sample size must be at least 1".into()));
    }
    spec.dataset.validate()?;
    let mut rng = stream_rng(spec.seed, 0);
    Ok(spec.dataset.sample_with(&mut rng, n))
}

/// `n` draws from the base distribution `N(0, I₂)`.
pub fn sample_base(n: usize, seed: u64) -> Array2<f64> {
    standard_normal_rows(n, DATA_DIM, seed)
}

fn column_names(d: usize) -> Vec<String> {
    match d {
        2 => vec!["x".into(), "y".into()],
        _ => (0..d).map(|i| format!("x{i}")).collect(),
    }
}

/// Writes one point per row with a header (`x,y` in two dimensions).
pub fn write_points_csv(path: &Path, points: &Array2<f64>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(column_names(points.ncols()))?;
    for row in points.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a headered CSV of points as written by [`write_points_csv`].
pub fn read_points_csv(path: &Path) -> Result<Array2<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let d = r.headers()?.len();
    let mut data = Vec::new();
    let mut n = 0;
    for rec in r.records() {
        let rec = rec?;
        for field in rec.iter() {
            data.push(field.trim().parse::<f64>().map_err(|_| {
                Error::Contract(format!("{}: `{field}` is not a number", path.display()))
            })?);
        }
        n += 1;
    }
    Array2::from_shape_vec((n, d), data)
        .map_err(|e| Error::Contract(format!("{}: {e}", path.display())))
}

/// Cumulative arc-length tables for a chain of quadratic Bézier arcs.
struct ArcTable<'a> {
    arcs: &'a [[Point; 3]],
    /// Per arc, cumulative length at `ARC_TABLE_SEGMENTS + 1` parameter values.
    cumulative: Vec<Vec<f64>>,
    /// Running total of arc lengths, one entry per arc.
    totals: Vec<f64>,
}

fn bezier(arc: &[Point; 3], u: f64) -> Point {
    let (a, b, c) = ((1.0 - u) * (1.0 - u), 2.0 * (1.0 - u) * u, u * u);
    [
        a * arc[0][0] + b * arc[1][0] + c * arc[2][0],
        a * arc[0][1] + b * arc[1][1] + c * arc[2][1],
    ]
}

impl<'a> ArcTable<'a> {
    fn new(arcs: &'a [[Point; 3]]) -> Self {
        let mut cumulative = Vec::with_capacity(arcs.len());
        let mut totals = Vec::with_capacity(arcs.len());
        let mut running = 0.0;
        for arc in arcs {
            let mut table = Vec::with_capacity(ARC_TABLE_SEGMENTS + 1);
            let mut len = 0.0;
            let mut prev = bezier(arc, 0.0);
            table.push(0.0);
            for i in 1..=ARC_TABLE_SEGMENTS {
                let p = bezier(arc, i as f64 / ARC_TABLE_SEGMENTS as f64);
                len += ((p[0] - prev[0]).powi(2) + (p[1] - prev[1]).powi(2)).sqrt();
                table.push(len);
                prev = p;
            }
            running += len;
            totals.push(running);
            cumulative.push(table);
        }
        Self {
            arcs,
            cumulative,
            totals,
        }
    }

    fn sample(&self, rng: &mut Rng) -> Point {
        let total = *self.totals.last().expect("at least one arc");
        let target = rng.random::<f64>() * total;
        let arc = self
            .totals
            .iter()
            .position(|&t| target < t)
            .unwrap_or(self.arcs.len() - 1);
        let offset = target - if arc == 0 { 0.0 } else { self.totals[arc - 1] };
        let table = &self.cumulative[arc];
        // First table entry with cumulative length >= offset.
        let hi = table.partition_point(|&l| l < offset).clamp(1, ARC_TABLE_SEGMENTS);
        let (l0, l1) = (table[hi - 1], table[hi]);
        let frac = if l1 > l0 { (offset - l0) / (l1 - l0) } else { 0.0 };
        let u = ((hi - 1) as f64 + frac.clamp(0.0, 1.0)) / ARC_TABLE_SEGMENTS as f64;
        bezier(&self.arcs[arc], u)
    }
}
