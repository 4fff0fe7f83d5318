//! Fixed-budget Euler sampling and one-step error oracles.

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::field::{norm, ClosedFormFlow, Convention, FieldKind, VelocityField};
use crate::schedule::Schedule;

/// Substeps of the classical RK4 oracle integrator.
pub const ORACLE_SUBSTEPS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub samples: Array2<f64>,
    /// Field evaluations per sample; always equals the budget.
    pub nfe: usize,
}

/// Integrates every row of `x0` along the schedule with
/// `x ← x - (s_k - s_{k+1}) v(x, s_k)`.
pub fn euler_sample(
    field: &dyn VelocityField,
    schedule: &Schedule,
    x0: ArrayView2<'_, f64>,
) -> Result<SampleOutput> {
    if x0.ncols() != field.dim() {
        return Err(Error::Contract(format!(
            "initial states have dimension {}, field has {}",
            x0.ncols(),
            field.dim()
        )));
    }
    let mut x = x0.to_owned();
    let mut nfe = 0;
    for (k, w) in schedule.knots().windows(2).enumerate() {
        let v = field.evaluate_batch(x.view(), w[0], Convention::Reverse);
        nfe += 1;
        x.scaled_add(-(w[0] - w[1]), &v);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::SamplerBlowup { step: k });
        }
    }
    Ok(SampleOutput { samples: x, nfe })
}

fn oracle(field: &dyn VelocityField) -> Result<&dyn ClosedFormFlow> {
    field.closed_form().ok_or_else(|| {
        Error::UnsupportedOracle("field has no closed-form flow or derivatives".into())
    })
}

/// One forward Euler step `x + h u(x, t)`.
fn euler_step(flow: &dyn ClosedFormFlow, x: &[f64], t: f64, h: f64) -> Vec<f64> {
    x.iter()
        .zip(flow.velocity(x, t))
        .map(|(x, u)| x + h * u)
        .collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
}

/// `(observed, predicted)` local error of one forward Euler step of size `h`
/// from `(x, t)`: the distance to the exact flow and `h²‖ẍ(t)‖ / 2`.
pub fn lte_one_step(field: &dyn VelocityField, x: &[f64], t: f64, h: f64) -> Result<(f64, f64)> {
    let flow = oracle(field)?;
    let exact = flow.flow(x, t, t + h);
    let observed = distance(&exact, &euler_step(flow, x, t, h));
    let predicted = h * h * norm(&flow.acceleration(x, t)) / 2.0;
    Ok((observed, predicted))
}

/// Classical RK4 for `dy/dτ = f(y, τ)` over `[t0, t1]`; oracle use only.
pub fn rk4<F>(f: F, y0: &[f64], t0: f64, t1: f64, substeps: usize) -> Vec<f64>
where
    F: Fn(&[f64], f64) -> Vec<f64>,
{
    let h = (t1 - t0) / substeps as f64;
    let mut y = y0.to_vec();
    let axpy = |y: &[f64], k: &[f64], c: f64| -> Vec<f64> {
        y.iter().zip(k).map(|(y, k)| y + c * k).collect()
    };
    for i in 0..substeps {
        let t = t0 + i as f64 * h;
        let k1 = f(&y, t);
        let k2 = f(&axpy(&y, &k1, h / 2.0), t + h / 2.0);
        let k3 = f(&axpy(&y, &k2, h / 2.0), t + h / 2.0);
        let k4 = f(&axpy(&y, &k3, h), t + h);
        for j in 0..y.len() {
            y[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
    }
    y
}

/// Distance between one Euler step and the exact flow over `[t, t + h]` of
/// the modified field `u_h = u - (h/2)(∂_t u + (∇u) u)`.
///
/// The modified flow is integrated with [`rk4`] at [`ORACLE_SUBSTEPS`].
pub fn modified_field_check(field: &dyn VelocityField, x: &[f64], t: f64, h: f64) -> Result<f64> {
    let flow = oracle(field)?;
    let modified = |y: &[f64], tau: f64| -> Vec<f64> {
        let acc = flow.acceleration(y, tau);
        flow.velocity(y, tau)
            .iter()
            .zip(acc)
            .map(|(u, a)| u - h / 2.0 * a)
            .collect()
    };
    let target = rk4(modified, x, t, t + h, ORACLE_SUBSTEPS);
    Ok(distance(&target, &euler_step(flow, x, t, h)))
}

/// Wraps a field and counts batch evaluations.
pub struct CountingField<'a> {
    inner: &'a dyn VelocityField,
    calls: AtomicUsize,
}

impl<'a> CountingField<'a> {
    pub fn new(inner: &'a dyn VelocityField) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl VelocityField for CountingField<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn kind(&self) -> FieldKind {
        self.inner.kind()
    }

    fn native_convention(&self) -> Convention {
        self.inner.native_convention()
    }

    fn eval_native(&self, points: ArrayView2<'_, f64>, time: f64) -> Array2<f64> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.eval_native(points, time)
    }

    fn closed_form(&self) -> Option<&dyn ClosedFormFlow> {
        self.inner.closed_form()
    }
}

/// Largest per-sample distance between Euler output and the exact flow
/// from `t = 0` to `t = 1`.
pub fn terminal_error(field: &dyn VelocityField, schedule: &Schedule, x0: ArrayView2<'_, f64>) -> Result<f64> {
    let flow = oracle(field)?;
    let out = euler_sample(field, schedule, x0)?;
    Ok(x0
        .rows()
        .into_iter()
        .zip(out.samples.rows())
        .map(|(start, end)| distance(&flow.flow(&start.to_vec(), 0.0, 1.0), &end.to_vec()))
        .fold(0.0, f64::max))
}
