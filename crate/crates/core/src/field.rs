//! Velocity fields and the forward/reverse time bridge.
//!
//! A field is evaluated natively in one time convention. The other convention
//! is derived through `u(x, t) = -v(x, 1 - t)`, so the two never disagree.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Convention {
    /// `u(x, t)`: noise at `t = 0`, data at `t = 1`.
    Forward,
    /// `v(x, s)` with `s = 1 - t`: noise at `s = 1`, data at `s = 0`.
    Reverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Learned,
    Analytic,
}

/// A deterministic map `(point, time) -> velocity`.
///
/// Implementations must be pure given their parameters; batch evaluation may
/// be called concurrently from several threads.
pub trait VelocityField: Send + Sync {
    fn dim(&self) -> usize;

    fn kind(&self) -> FieldKind;

    fn native_convention(&self) -> Convention;

    /// Evaluates every row of `points` at one time, in the native convention.
    fn eval_native(&self, points: ArrayView2<'_, f64>, time: f64) -> Array2<f64>;

    /// Closed-form flow and derivatives, when the field has them.
    fn closed_form(&self) -> Option<&dyn ClosedFormFlow> {
        None
    }

    fn evaluate_batch(
        &self,
        points: ArrayView2<'_, f64>,
        time: f64,
        convention: Convention,
    ) -> Array2<f64> {
        if convention == self.native_convention() {
            self.eval_native(points, time)
        } else {
            let mut out = self.eval_native(points, 1.0 - time);
            out.mapv_inplace(|v| -v);
            out
        }
    }

    fn evaluate(&self, point: &[f64], time: f64, convention: Convention) -> Vec<f64> {
        let view = ArrayView2::from_shape((1, point.len()), point).expect("1×d view");
        self.evaluate_batch(view, time, convention).into_raw_vec_and_offset().0
    }
}

/// Oracle interface for analytic fields, always in forward time.
pub trait ClosedFormFlow {
    /// Forward velocity `u(x, t)`.
    fn velocity(&self, x: &[f64], t: f64) -> Vec<f64>;

    /// Exact solution of `dx/dt = u(x, t)` from `(x, t0)` to time `t1`.
    fn flow(&self, x: &[f64], t0: f64, t1: f64) -> Vec<f64>;

    /// `∂_t u(x, t)`.
    fn time_derivative(&self, x: &[f64], t: f64) -> Vec<f64>;

    /// `∇_x u(x, t)` as a `d × d` matrix, `[i, j] = ∂u_i / ∂x_j`.
    fn jacobian(&self, x: &[f64], t: f64) -> Array2<f64>;

    /// Trajectory acceleration `ẍ = ∂_t u + (∇_x u) u` at state `x`, time `t`.
    fn acceleration(&self, x: &[f64], t: f64) -> Vec<f64> {
        let u = self.velocity(x, t);
        let jac = self.jacobian(x, t);
        let mut acc = self.time_derivative(x, t);
        for (i, a) in acc.iter_mut().enumerate() {
            *a += jac.row(i).iter().zip(&u).map(|(j, u)| j * u).sum::<f64>();
        }
        acc
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
