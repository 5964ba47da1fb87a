use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Model and cost constants of the leader–follower system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    /// Follower–follower interaction strength.
    pub k: f64,
    /// Leader–follower interaction strength.
    pub k_leader: f64,
    /// Common diffusion coefficient of followers and leader.
    pub sigma: f64,
    /// Interaction radius on the unit torus.
    pub radius: f64,
    /// Control penalty.
    pub lambda: f64,
    /// Time horizon.
    pub horizon: f64,
    /// Number of followers.
    pub followers: usize,
}

impl ModelParams {
    /// k = 10, k_L = 5, σ = 0.05, R = 0.15, λ = 0.01, T = 1, N = 99.
    pub fn hegselmann_krause() -> Self {
        Self {
            k: 10.0,
            k_leader: 5.0,
            sigma: 0.05,
            radius: 0.15,
            lambda: 0.01,
            horizon: 1.0,
            followers: 99,
        }
    }

    /// Lists every violated invariant; empty when the parameters are valid.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let fields = [
            ("k", self.k),
            ("k_leader", self.k_leader),
            ("sigma", self.sigma),
            ("radius", self.radius),
            ("lambda", self.lambda),
            ("horizon", self.horizon),
        ];
        for (name, x) in fields {
            if !x.is_finite() {
                v.push(format!("{name} must be finite (got {x})"));
            }
        }
        if self.sigma < 0.0 {
            v.push(format!("sigma must be >= 0 (got {})", self.sigma));
        }
        if !(self.radius > 0.0 && self.radius <= 0.5) {
            v.push(format!(
                "radius must lie in (0, 0.5], the torus half-width (got {})",
                self.radius
            ));
        }
        if !(self.lambda > 0.0) {
            v.push(format!("lambda must be a positive constant (got {})", self.lambda));
        }
        if !(self.horizon > 0.0) {
            v.push(format!("horizon must be > 0 (got {})", self.horizon));
        }
        if self.k < 0.0 {
            v.push(format!("k must be >= 0 (got {})", self.k));
        }
        if self.k_leader < 0.0 {
            v.push(format!("k_leader must be >= 0 (got {})", self.k_leader));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(v.join("; ")))
        }
    }
}

/// Uniform grid `t_j = j·dt`, `j = 0..=steps`, on `[0, horizon]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
    pub dt: f64,
}

impl TimeGrid {
    pub fn from_steps(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) || steps == 0 {
            return Err(Error::InvalidParameter(format!(
                "time grid needs horizon > 0 and steps >= 1 (got {horizon}, {steps})"
            )));
        }
        Ok(Self {
            horizon,
            steps,
            dt: horizon / steps as f64,
        })
    }

    /// Grid with step `dt`; `horizon / dt` must be an integer to 1e-12
    /// relative tolerance.
    pub fn with_dt(horizon: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be > 0 (got {dt})")));
        }
        let steps = (horizon / dt).round();
        if steps < 1.0 || ((steps * dt - horizon) / horizon).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "dt = {dt} does not divide the horizon {horizon}"
            )));
        }
        Self::from_steps(horizon, steps as usize)
    }

    #[inline]
    pub fn time(&self, j: usize) -> f64 {
        if j == self.steps {
            self.horizon
        } else {
            j as f64 * self.dt
        }
    }

    /// Index of the node closest to `t`.
    pub fn node_at(&self, t: f64) -> usize {
        ((t / self.dt).round() as usize).min(self.steps)
    }
}
