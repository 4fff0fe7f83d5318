//! Closed-form test fields, all native in forward time.
//!
//! Spec strings accepted by [`analytic_field`]:
//!
//! | spec                               | field                                      |
//! |------------------------------------|--------------------------------------------|
//! | `constant:c1,c2,...`               | `u = c`                                    |
//! | `linear:identity` / `linear:a,...` | `u = A x` (row-major square `A`)           |
//! | `time-quadratic[:a1,a2,b1,b2,c1,c2]` | `u = a + b t + c t²` in 2D              |
//! | `bump:center,width[,amp[,spread]]` | sigmoid ramp in `x₀`, see [`AccelerationBump`] |

use std::str::FromStr;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::field::{ClosedFormFlow, Convention, FieldKind, VelocityField};

/// A sigmoid velocity ramp along the first axis.
///
/// `u₀(x, t) = amplitude · σ((t - c(x)) / width)` with
/// `c(x) = center + spread · tanh(x₁)`; every other component is zero.
/// Trajectories accelerate only around `t = c(x)`, and since `x₁` never moves
/// the acceleration `ẍ₀ = amplitude · σ'(z) / width` is exact along the flow.
/// With `spread = 0` every trajectory peaks at `center`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccelerationBump {
    pub center: f64,
    pub width: f64,
    pub amplitude: f64,
    pub spread: f64,
}

impl AccelerationBump {
    fn peak_time(&self, x: &[f64]) -> f64 {
        self.center + self.spread * x[1].tanh()
    }

    fn z(&self, x: &[f64], t: f64) -> f64 {
        (t - self.peak_time(x)) / self.width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnalyticField {
    Constant(Vec<f64>),
    Linear(Array2<f64>),
    TimeQuadratic { a: Vec<f64>, b: Vec<f64>, c: Vec<f64> },
    AccelerationBump(AccelerationBump),
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn mat_vec(a: &Array2<f64>, x: &[f64]) -> Vec<f64> {
    a.rows()
        .into_iter()
        .map(|row| row.iter().zip(x).map(|(a, x)| a * x).sum())
        .collect()
}

/// `exp(A)` by scaling and squaring with a truncated Taylor series.
pub fn matrix_exp(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let norm = a
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut squarings = 0;
    let mut scale = 1.0;
    while norm * scale > 0.25 {
        scale *= 0.5;
        squarings += 1;
    }
    let scaled = a * scale;
    let mut term = Array2::<f64>::eye(n);
    let mut sum = Array2::<f64>::eye(n);
    for k in 1..=20 {
        term = term.dot(&scaled) / k as f64;
        sum += &term;
    }
    for _ in 0..squarings {
        sum = sum.dot(&sum);
    }
    sum
}

impl AnalyticField {
    pub fn constant(c: Vec<f64>) -> Self {
        AnalyticField::Constant(c)
    }

    pub fn linear(a: Array2<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() || a.is_empty() {
            return Err(Error::Config(format!(
                "linear field needs a non-empty square matrix, got {:?}",
                a.shape()
            )));
        }
        Ok(AnalyticField::Linear(a))
    }

    pub fn bump(center: f64, width: f64) -> Self {
        AnalyticField::AccelerationBump(AccelerationBump {
            center,
            width,
            amplitude: 1.0,
            spread: 0.0,
        })
    }

    pub fn bump_with(center: f64, width: f64, amplitude: f64, spread: f64) -> Result<Self> {
        if !(width > 0.0) || !center.is_finite() || !amplitude.is_finite() || !spread.is_finite() {
            return Err(Error::Config(format!(
                "bump needs finite parameters and width > 0 (center {center}, width {width})"
            )));
        }
        Ok(AnalyticField::AccelerationBump(AccelerationBump {
            center,
            width,
            amplitude,
            spread,
        }))
    }

    /// `‖ẍ(t)‖` along the trajectory through `x` at time `t`.
    pub fn acceleration_norm(&self, x: &[f64], t: f64) -> f64 {
        crate::field::norm(&self.acceleration(x, t))
    }
}

impl ClosedFormFlow for AnalyticField {
    fn velocity(&self, x: &[f64], t: f64) -> Vec<f64> {
        match self {
            AnalyticField::Constant(c) => c.clone(),
            AnalyticField::Linear(a) => mat_vec(a, x),
            AnalyticField::TimeQuadratic { a, b, c } => (0..a.len())
                .map(|i| a[i] + b[i] * t + c[i] * t * t)
                .collect(),
            AnalyticField::AccelerationBump(p) => {
                let mut u = vec![0.0; x.len()];
                u[0] = p.amplitude * sigmoid(p.z(x, t));
                u
            }
        }
    }

    fn flow(&self, x: &[f64], t0: f64, t1: f64) -> Vec<f64> {
        let dt = t1 - t0;
        match self {
            AnalyticField::Constant(c) => x.iter().zip(c).map(|(x, c)| x + dt * c).collect(),
            AnalyticField::Linear(a) => mat_vec(&matrix_exp(&(a * dt)), x),
            AnalyticField::TimeQuadratic { a, b, c } => {
                let p1 = t1 - t0;
                let p2 = (t1 * t1 - t0 * t0) / 2.0;
                let p3 = (t1 * t1 * t1 - t0 * t0 * t0) / 3.0;
                (0..x.len())
                    .map(|i| x[i] + a[i] * p1 + b[i] * p2 + c[i] * p3)
                    .collect()
            }
            AnalyticField::AccelerationBump(p) => {
                let mut out = x.to_vec();
                out[0] += p.amplitude
                    * p.width
                    * (softplus(p.z(x, t1)) - softplus(p.z(x, t0)));
                out
            }
        }
    }

    fn time_derivative(&self, x: &[f64], t: f64) -> Vec<f64> {
        match self {
            AnalyticField::Constant(c) => vec![0.0; c.len()],
            AnalyticField::Linear(a) => vec![0.0; a.nrows()],
            AnalyticField::TimeQuadratic { b, c, .. } => {
                (0..b.len()).map(|i| b[i] + 2.0 * c[i] * t).collect()
            }
            AnalyticField::AccelerationBump(p) => {
                let s = sigmoid(p.z(x, t));
                let mut d = vec![0.0; x.len()];
                d[0] = p.amplitude * s * (1.0 - s) / p.width;
                d
            }
        }
    }

    fn jacobian(&self, x: &[f64], t: f64) -> Array2<f64> {
        let d = self.dim();
        match self {
            AnalyticField::Linear(a) => a.clone(),
            AnalyticField::AccelerationBump(p) => {
                let mut j = Array2::zeros((d, d));
                let s = sigmoid(p.z(x, t));
                let sech2 = 1.0 - x[1].tanh().powi(2);
                j[[0, 1]] = -p.amplitude * s * (1.0 - s) * p.spread * sech2 / p.width;
                j
            }
            _ => Array2::zeros((d, d)),
        }
    }
}

impl VelocityField for AnalyticField {
    fn dim(&self) -> usize {
        match self {
            AnalyticField::Constant(c) => c.len(),
            AnalyticField::Linear(a) => a.nrows(),
            AnalyticField::TimeQuadratic { a, .. } => a.len(),
            AnalyticField::AccelerationBump(_) => 2,
        }
    }

    fn kind(&self) -> FieldKind {
        FieldKind::Analytic
    }

    fn native_convention(&self) -> Convention {
        Convention::Forward
    }

    fn eval_native(&self, points: ArrayView2<'_, f64>, time: f64) -> Array2<f64> {
        let d = self.dim();
        let mut out = Array2::zeros((points.nrows(), d));
        for (row, mut o) in points.rows().into_iter().zip(out.rows_mut()) {
            let x = row.to_vec();
            for (o, u) in o.iter_mut().zip(self.velocity(&x, time)) {
                *o = u;
            }
        }
        out
    }

    fn closed_form(&self) -> Option<&dyn ClosedFormFlow> {
        Some(self)
    }
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("`{v}` is not a number")))
        })
        .collect()
}

impl FromStr for AnalyticField {
    type Err = Error;

    fn from_str(spec: &str) -> Result<Self> {
        let (name, args) = match spec.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a)),
            None => (spec.trim(), None),
        };
        match (name, args) {
            ("constant", Some(a)) => Ok(Self::constant(parse_list(a)?)),
            ("linear", Some("identity")) => Self::linear(Array2::eye(2)),
            ("linear", Some(a)) => {
                let v = parse_list(a)?;
                let d = (v.len() as f64).sqrt().round() as usize;
                if d * d != v.len() {
                    return Err(Error::Config(format!(
                        "linear field needs a square number of entries, got {}",
                        v.len()
                    )));
                }
                Self::linear(Array2::from_shape_vec((d, d), v).expect("square"))
            }
            ("time-quadratic", None) => Ok(AnalyticField::TimeQuadratic {
                a: vec![0.5, 0.0],
                b: vec![0.0, 1.0],
                c: vec![1.0, -1.0],
            }),
            ("time-quadratic", Some(a)) => {
                let v = parse_list(a)?;
                if v.len() != 6 {
                    return Err(Error::Config(
                        "time-quadratic takes a1,a2,b1,b2,c1,c2".into(),
                    ));
                }
                Ok(AnalyticField::TimeQuadratic {
                    a: v[0..2].to_vec(),
                    b: v[2..4].to_vec(),
                    c: v[4..6].to_vec(),
                })
            }
            ("bump" | "acceleration-bump", Some(a)) => {
                let v = parse_list(a)?;
                match v.as_slice() {
                    [c, w] => Self::bump_with(*c, *w, 1.0, 0.0),
                    [c, w, amp] => Self::bump_with(*c, *w, *amp, 0.0),
                    [c, w, amp, spread] => Self::bump_with(*c, *w, *amp, *spread),
                    _ => Err(Error::Config(
                        "bump takes center,width[,amplitude[,spread]]".into(),
                    )),
                }
            }
            _ => Err(Error::Config(format!(
                "unknown analytic field `{spec}` (expected constant:.., linear:.., time-quadratic, bump:..)"
            ))),
        }
    }
}

/// Builds an analytic field from its spec string.
pub fn analytic_field(spec: &str) -> Result<AnalyticField> {
    spec.parse()
}
