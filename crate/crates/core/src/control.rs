//! Piecewise-constant controls `u^a(t) = Σ_k a_k 1_{I_k}(t)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::TimeGrid;

/// Breakpoints `0 = t_1 < … < t_m = T` defining intervals `I_k = [t_k, t_{k+1})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Basis {
    breakpoints: Vec<f64>,
}

impl Basis {
    pub fn new(breakpoints: Vec<f64>) -> Result<Self> {
        if breakpoints.len() < 2 {
            return Err(Error::InvalidParameter(
                "a basis needs at least two breakpoints".into(),
            ));
        }
        if breakpoints[0] != 0.0 {
            return Err(Error::InvalidParameter("first breakpoint must be 0".into()));
        }
        if breakpoints.iter().any(|t| !t.is_finite())
            || breakpoints.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::InvalidParameter(
                "breakpoints must be finite and strictly increasing".into(),
            ));
        }
        Ok(Self { breakpoints })
    }

    /// `intervals` equal intervals on `[0, horizon]`.
    pub fn uniform(horizon: f64, intervals: usize) -> Result<Self> {
        if intervals == 0 {
            return Err(Error::InvalidParameter("need at least one interval".into()));
        }
        let mut b: Vec<f64> = (0..intervals)
            .map(|k| horizon * k as f64 / intervals as f64)
            .collect();
        b.push(horizon);
        Self::new(b)
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn len(&self) -> usize {
        self.breakpoints.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn horizon(&self) -> f64 {
        *self.breakpoints.last().unwrap()
    }

    pub fn interval_lengths(&self) -> Vec<f64> {
        self.breakpoints.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Index `k` with `t ∈ I_k`; `T` itself belongs to the last interval.
    pub fn interval_of(&self, t: f64) -> usize {
        let inner = &self.breakpoints[1..self.breakpoints.len() - 1];
        inner.partition_point(|&b| b <= t)
    }

    /// Basis for the remaining horizon after dropping the first `k` intervals,
    /// re-based so the new first breakpoint is 0.
    pub fn tail(&self, k: usize) -> Result<Self> {
        if k >= self.len() {
            return Err(Error::InvalidParameter(format!(
                "cannot drop {k} of {} intervals",
                self.len()
            )));
        }
        let t0 = self.breakpoints[k];
        Self::new(self.breakpoints[k..].iter().map(|t| t - t0).collect())
    }

    /// Maps every Euler step of `grid` to its interval. Breakpoints must
    /// fall on grid nodes and the basis must end at the grid horizon.
    pub fn schedule(&self, grid: &TimeGrid) -> Result<StepSchedule> {
        if (self.horizon() - grid.horizon).abs() > 1e-9 * grid.horizon.max(1.0) {
            return Err(Error::ControlCoverage {
                horizon: grid.horizon,
            });
        }
        let mut nodes = Vec::with_capacity(self.breakpoints.len());
        for &b in &self.breakpoints {
            let j = (b / grid.dt).round();
            if (j * grid.dt - b).abs() > 1e-6 * grid.dt {
                return Err(Error::InvalidParameter(format!(
                    "breakpoint {b} is not a multiple of dt = {}",
                    grid.dt
                )));
            }
            nodes.push(j as usize);
        }
        let mut interval_of_step = Vec::with_capacity(grid.steps);
        for (k, w) in nodes.windows(2).enumerate() {
            interval_of_step.extend(std::iter::repeat_n(k, w[1] - w[0]));
        }
        let steps_per_interval = nodes.windows(2).map(|w| w[1] - w[0]).collect();
        Ok(StepSchedule {
            dt: grid.dt,
            interval_of_step,
            steps_per_interval,
        })
    }
}

/// Assignment of Euler steps to control intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSchedule {
    pub dt: f64,
    pub interval_of_step: Vec<usize>,
    pub steps_per_interval: Vec<usize>,
}

impl StepSchedule {
    pub fn intervals(&self) -> usize {
        self.steps_per_interval.len()
    }

    /// Discrete interval lengths `|I_k| = (steps in I_k)·dt`.
    pub fn interval_lengths(&self) -> Vec<f64> {
        self.steps_per_interval
            .iter()
            .map(|&s| s as f64 * self.dt)
            .collect()
    }

    /// Control value at every step (left endpoint evaluation).
    pub fn controls(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        if coeffs.len() != self.intervals() {
            return Err(Error::DimensionMismatch {
                expected: self.intervals(),
                got: coeffs.len(),
            });
        }
        Ok(self.interval_of_step.iter().map(|&k| coeffs[k]).collect())
    }

    /// Schedule of the steps from interval `k` onwards, re-indexed from 0.
    pub fn tail(&self, k: usize) -> Result<StepSchedule> {
        if k >= self.intervals() {
            return Err(Error::InvalidParameter(format!(
                "cannot drop {k} of {} intervals",
                self.intervals()
            )));
        }
        let steps_per_interval: Vec<usize> = self.steps_per_interval[k..].to_vec();
        let interval_of_step = steps_per_interval
            .iter()
            .enumerate()
            .flat_map(|(i, &s)| std::iter::repeat_n(i, s))
            .collect();
        Ok(StepSchedule {
            dt: self.dt,
            interval_of_step,
            steps_per_interval,
        })
    }

    /// Total number of Euler steps.
    pub fn steps(&self) -> usize {
        self.interval_of_step.len()
    }

    /// `(λ/2) Σ_j u(t_j)² dt`.
    pub fn control_cost(&self, coeffs: &[f64], lambda: f64) -> f64 {
        0.5 * lambda
            * coeffs
                .iter()
                .zip(&self.steps_per_interval)
                .map(|(a, &s)| a * a * s as f64 * self.dt)
                .sum::<f64>()
    }
}

/// Coefficients on a [`Basis`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseConstantControl {
    pub basis: Basis,
    pub coeffs: Vec<f64>,
}

impl PiecewiseConstantControl {
    pub fn new(basis: Basis, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != basis.len() {
            return Err(Error::DimensionMismatch {
                expected: basis.len(),
                got: coeffs.len(),
            });
        }
        if let Some(&bad) = coeffs.iter().find(|a| !a.is_finite()) {
            return Err(Error::NonFinite(bad));
        }
        Ok(Self { basis, coeffs })
    }

    pub fn zero(basis: Basis) -> Self {
        let n = basis.len();
        Self {
            basis,
            coeffs: vec![0.0; n],
        }
    }

    /// `u(t) = a_k` for `t ∈ I_k`; `u(T) = a_{m−1}`.
    pub fn eval(&self, t: f64) -> f64 {
        self.coeffs[self.basis.interval_of(t)]
    }
}
