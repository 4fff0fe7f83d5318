//! Reverse-time discretizations of the unit interval.
//!
//! Everything in this crate stores grids in the reverse-time coordinate
//! `s = 1 - t`: knot 0 is the noise end (`s = 1`) and the last knot is the data
//! end (`s = 0`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A strictly descending grid `1 = s_0 > s_1 > ... > s_N = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Grid {
    knots: Vec<f64>,
}

impl Grid {
    /// Uniform grid with `n` intervals, `s_k = 1 - k/n`.
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("a grid needs at least one interval".into()));
        }
        let knots = (0..=n).map(|k| 1.0 - k as f64 / n as f64).collect();
        Ok(Self { knots })
    }

    /// Validates endpoint and strict-descent invariants.
    pub fn from_knots(knots: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::Contract(format!(
                "grid needs at least 2 knots, got {}",
                knots.len()
            )));
        }
        if knots[0] != 1.0 || knots[knots.len() - 1] != 0.0 {
            return Err(Error::Contract(format!(
                "grid must start at s=1 and end at s=0 (got {} .. {})",
                knots[0],
                knots[knots.len() - 1]
            )));
        }
        if let Some(i) = knots.windows(2).position(|w| !(w[0] > w[1])) {
            return Err(Error::Contract(format!(
                "grid is not strictly descending at knot {}: {} -> {}",
                i,
                knots[i],
                knots[i + 1]
            )));
        }
        Ok(Self { knots })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of intervals `N` (one less than the number of knots).
    pub fn intervals(&self) -> usize {
        self.knots.len() - 1
    }

    /// Step sizes `s_k - s_{k+1}`, all positive.
    pub fn gaps(&self) -> Vec<f64> {
        self.knots.windows(2).map(|w| w[0] - w[1]).collect()
    }

    /// Knots mapped to forward time `t = 1 - s` (ascending).
    pub fn forward_times(&self) -> Vec<f64> {
        self.knots.iter().map(|s| 1.0 - s).collect()
    }
}

impl TryFrom<Vec<f64>> for Grid {
    type Error = Error;

    fn try_from(knots: Vec<f64>) -> Result<Self> {
        Grid::from_knots(knots)
    }
}

impl From<Grid> for Vec<f64> {
    fn from(grid: Grid) -> Self {
        grid.knots
    }
}
