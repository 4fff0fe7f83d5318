//! Fixed-budget Euler time grids: uniform, shifted, and sharpness quantiles.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibration::SharpnessProfile;
use crate::error::{Error, Result};

/// Separation applied to coincident quantile knots.
pub const TIE_GAP: f64 = 1e-9;

/// Descending reverse-time knots `1 = s_0 > s_1 > ... > s_B = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Schedule {
    knots: Vec<f64>,
}

impl Schedule {
    pub fn from_knots(knots: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::Contract(format!(
                "a schedule needs at least 2 knots, got {}",
                knots.len()
            )));
        }
        if knots[0] != 1.0 || knots[knots.len() - 1] != 0.0 {
            return Err(Error::Contract(format!(
                "schedule must run from 1 to 0, got {} .. {}",
                knots[0],
                knots[knots.len() - 1]
            )));
        }
        if let Some(k) = knots.windows(2).position(|w| !(w[0] > w[1])) {
            return Err(Error::Contract(format!(
                "schedule is not strictly descending at knot {}",
                k + 1
            )));
        }
        Ok(Self { knots })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn budget(&self) -> usize {
        self.knots.len() - 1
    }

    /// `t_k = 1 - s_k`, ascending.
    pub fn forward_times(&self) -> Vec<f64> {
        self.knots.iter().map(|s| 1.0 - s).collect()
    }

    pub fn gaps(&self) -> Vec<f64> {
        self.knots.windows(2).map(|w| w[0] - w[1]).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.knots)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// CSV with header `step,reverse_time,forward_time`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", "reverse_time", "forward_time"])?;
        for (k, s) in self.knots.iter().enumerate() {
            w.write_record([k.to_string(), s.to_string(), (1.0 - s).to_string()])?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Numeric(e.to_string()))?)
            .expect("csv output is utf-8"))
    }
}

impl TryFrom<Vec<f64>> for Schedule {
    type Error = Error;

    fn try_from(knots: Vec<f64>) -> Result<Self> {
        Self::from_knots(knots)
    }
}

impl From<Schedule> for Vec<f64> {
    fn from(s: Schedule) -> Self {
        s.knots
    }
}

fn check_budget(budget: usize) -> Result<()> {
    if budget == 0 {
        Err(Error::Config("budget must be at least 1".into()))
    } else {
        Ok(())
    }
}

/// `s_k = 1 - k/B`.
pub fn uniform_schedule(budget: usize) -> Result<Schedule> {
    check_budget(budget)?;
    let knots = (0..=budget)
        .map(|k| 1.0 - k as f64 / budget as f64)
        .collect();
    Schedule::from_knots(knots)
}

/// Forward-time shift `t ↦ αt / (1 + (α - 1)t)` applied to uniform knots.
///
/// `t = 1` is returned as is, since `1 + (α - 1)` need not round to `α`.
pub fn shift_time(t: f64, alpha: f64) -> f64 {
    if t == 1.0 {
        return 1.0;
    }
    alpha * t / (1.0 + (alpha - 1.0) * t)
}

/// Uniform forward-time knots pushed through [`shift_time`]; `α > 1` moves
/// steps toward the data end.
pub fn shifted_schedule(budget: usize, alpha: f64) -> Result<Schedule> {
    check_budget(budget)?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("shift must be positive, got {alpha}")));
    }
    let knots = (0..=budget)
        .map(|k| 1.0 - shift_time(k as f64 / budget as f64, alpha))
        .collect();
    Schedule::from_knots(knots)
}

/// Piecewise-linear inverse of the empirical CDF, anchored at `(0, 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseCdf {
    /// Cumulative mass, ascending from 0 to exactly 1.
    cumulative: Vec<f64>,
    /// Forward times, ascending from 0.
    times: Vec<f64>,
}

impl InverseCdf {
    /// Builds the map from support points and nonnegative masses.
    pub fn from_masses(times: &[f64], masses: &[f64]) -> Result<Self> {
        if times.is_empty() || times.len() != masses.len() {
            return Err(Error::Contract(format!(
                "{} support points for {} masses",
                times.len(),
                masses.len()
            )));
        }
        if masses.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
            return Err(Error::Contract("masses must be finite and nonnegative".into()));
        }
        let mut pairs: Vec<(f64, f64)> = times.iter().copied().zip(masses.iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        if !(pairs[0].0 > 0.0) || pairs.windows(2).any(|w| !(w[0].0 < w[1].0)) {
            return Err(Error::Contract(
                "support points must be distinct and positive".into(),
            ));
        }
        let total: f64 = masses.iter().sum();
        if !(total > 0.0) {
            return Err(Error::DegenerateProfile);
        }
        let mut cumulative = vec![0.0];
        let mut knot_times = vec![0.0];
        let mut acc = 0.0;
        for (t, m) in pairs {
            acc += m;
            cumulative.push(acc / total);
            knot_times.push(t);
        }
        *cumulative.last_mut().expect("non-empty") = 1.0;
        Ok(Self {
            cumulative,
            times: knot_times,
        })
    }

    pub fn knots(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.cumulative.iter().copied().zip(self.times.iter().copied())
    }

    /// `F⁻¹(q)` for `q ∈ [0, 1]`, clamped outside.
    pub fn eval(&self, q: f64) -> f64 {
        if q <= 0.0 {
            return 0.0;
        }
        let last = self.times.len() - 1;
        if q >= 1.0 {
            return self.times[last];
        }
        // First knot whose cumulative mass reaches q; its predecessor is below q.
        let k = self.cumulative.partition_point(|c| *c < q);
        let (c0, c1) = (self.cumulative[k - 1], self.cumulative[k]);
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        t0 + (t1 - t0) * (q - c0) / (c1 - c0)
    }

    /// Number of knots, including the anchor.
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

pub fn build_inverse_cdf(profile: &SharpnessProfile) -> Result<InverseCdf> {
    profile.validate()?;
    InverseCdf::from_masses(&profile.midpoints, &profile.masses)
}

/// Knots `s_b = 1 - F⁻¹(b/B)` with the terminal knot pinned to `s_B = 0`.
///
/// Coincident knots are pulled apart by [`TIE_GAP`]; if that pushes an
/// interior knot to zero the budget exceeds what the map can resolve.
pub fn sharp_schedule(cdf: &InverseCdf, budget: usize) -> Result<Schedule> {
    check_budget(budget)?;
    let mut knots = Vec::with_capacity(budget + 1);
    knots.push(1.0);
    for b in 1..budget {
        let s = 1.0 - cdf.eval(b as f64 / budget as f64);
        let prev = knots[b - 1];
        let s = if s < prev { s } else { prev - TIE_GAP };
        if !(s > 0.0) {
            return Err(Error::QuantileCapacity {
                budget,
                capacity: b,
            });
        }
        knots.push(s);
    }
    knots.push(0.0);
    Schedule::from_knots(knots)
}

/// Sharp schedule straight from a profile.
pub fn sharp_schedule_from_profile(profile: &SharpnessProfile, budget: usize) -> Result<Schedule> {
    sharp_schedule(&build_inverse_cdf(profile)?, budget)
}

/// Schedule choice as written on the command line:
/// `uniform`, `shifted:ALPHA` or `sharp:PROFILE.json`.
#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleSpec {
    Uniform,
    Shifted(f64),
    Sharp(PathBuf),
}

impl ScheduleSpec {
    pub fn build(&self, budget: usize) -> Result<Schedule> {
        match self {
            ScheduleSpec::Uniform => uniform_schedule(budget),
            ScheduleSpec::Shifted(alpha) => shifted_schedule(budget, *alpha),
            ScheduleSpec::Sharp(path) => {
                sharp_schedule_from_profile(&SharpnessProfile::load(path)?, budget)
            }
        }
    }
}

impl FromStr for ScheduleSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "uniform" => Ok(ScheduleSpec::Uniform),
            Some(("shifted", a)) => a
                .parse::<f64>()
                .map(ScheduleSpec::Shifted)
                .map_err(|_| Error::Config(format!("bad shift `{a}`"))),
            Some(("sharp", p)) if !p.is_empty() => Ok(ScheduleSpec::Sharp(PathBuf::from(p))),
            _ => Err(Error::Config(format!(
                "unknown schedule `{s}` (expected uniform, shifted:ALPHA or sharp:PROFILE.json)"
            ))),
        }
    }
}

impl fmt::Display for ScheduleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleSpec::Uniform => write!(f, "uniform"),
            ScheduleSpec::Shifted(a) => write!(f, "shifted:{a}"),
            ScheduleSpec::Sharp(p) => write!(f, "sharp:{}", p.display()),
        }
    }
}

/// Writes a schedule as JSON or CSV depending on the file extension.
pub fn export_schedule(schedule: &Schedule, path: &Path) -> Result<()> {
    let text = match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => schedule.to_csv()?,
        _ => schedule.to_json()?,
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
