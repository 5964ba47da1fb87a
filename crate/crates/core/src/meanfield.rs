//! The nonlinear Fokker–Planck equation for the follower density, coupled
//! to the leader SDE, on a periodic finite-volume grid.
//!
//! Cell `i` covers `[i·dx, (i+1)·dx)` with centre `(i+½)·dx`. The density is
//! advanced by explicit Euler in conservative flux form with Chang–Cooper
//! (exponentially fitted) fluxes
//!
//! ```text
//! F_{i+½} = B_{i+½}((1−δ)g_{i+1} + δ g_i) − D (g_{i+1} − g_i)/dx,   D = σ²/2
//! δ = 1/w − 1/(eʷ − 1),   w = −B_{i+½}·dx/D
//! ```
//!
//! so that `δ → 1` (upwind from the left) for strong rightward drift and
//! `δ → ½` (central) when diffusion dominates.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::control::PiecewiseConstantControl;
use crate::dynamics::{hk_kernel, RunningCost};
use crate::error::{Error, Result};
use crate::params::{ModelParams, TimeGrid};
use crate::rng::{SeedSpec, Stream};
use crate::system::{ControlledSystem, Rollout, Traced};
use crate::torus::{geodesic_disp, wrap_f64};

const MASS_TOL: f64 = 1e-10;
const NEGATIVITY_TOL: f64 = 1e-14;

/// Piecewise-constant probability density on `n` equal cells of the torus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDensity {
    values: Vec<f64>,
}

impl GridDensity {
    /// Validates non-negativity and unit mass.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let g = Self::new_unchecked(values);
        g.check()?;
        Ok(g)
    }

    /// Wraps cell values without validation.
    pub fn new_unchecked(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(vec![1.0; n])
    }

    /// Cell-centre samples of a non-negative function, normalised to unit
    /// mass.
    pub fn from_fn(n: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("grid needs at least one cell".into()));
        }
        let dx = 1.0 / n as f64;
        let raw: Vec<f64> = (0..n).map(|i| f((i as f64 + 0.5) * dx)).collect();
        if let Some(&v) = raw.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidParameter(format!("density value {v} is not finite and non-negative")));
        }
        let mass: f64 = raw.iter().sum::<f64>() * dx;
        if !(mass > 0.0) {
            return Err(Error::Unnormalised { mass });
        }
        Self::new(raw.into_iter().map(|v| v / mass).collect())
    }

    /// Normalised histogram of torus points.
    pub fn from_samples(samples: &[f64], n: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyMeasure);
        }
        if n == 0 {
            return Err(Error::InvalidParameter("grid needs at least one cell".into()));
        }
        let mut values = vec![0.0; n];
        let w = n as f64 / samples.len() as f64;
        for &x in samples {
            let i = ((wrap_f64(x) * n as f64) as usize).min(n - 1);
            values[i] += w;
        }
        Self::new(values)
    }

    fn check(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::InvalidParameter("grid needs at least one cell".into()));
        }
        if let Some(&v) = self.values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(v));
        }
        let min = self.values.iter().cloned().fold(f64::INFINITY, f64::min);
        if min < 0.0 {
            return Err(Error::Negativity { min });
        }
        let mass = self.mass();
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::Unnormalised { mass });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dx(&self) -> f64 {
        1.0 / self.values.len() as f64
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn centre(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.dx()
    }

    /// `Σ g_i dx`.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.dx()
    }

    /// Probability mass within geodesic distance `radius` of `y`, with the
    /// arc's partial overlap of boundary cells counted exactly.
    pub fn mass_within(&self, y: f64, radius: f64) -> f64 {
        let dx = self.dx();
        if radius >= 0.5 {
            return self.mass();
        }
        let (lo, hi) = (y - radius, y + radius);
        let first = (lo / dx).floor() as i64;
        let last = (hi / dx).floor() as i64;
        let n = self.values.len() as i64;
        (first..=last)
            .map(|c| {
                let a = (c as f64 * dx).max(lo);
                let b = ((c + 1) as f64 * dx).min(hi);
                self.values[c.rem_euclid(n) as usize] * (b - a).max(0.0)
            })
            .sum()
    }

    /// `count` i.i.d. draws from the piecewise-constant density: a cell by
    /// inverse CDF, then a uniform position inside it.
    pub fn sample<R: Rng>(&self, rng: &mut R, count: usize) -> Vec<f64> {
        let dx = self.dx();
        let mut cdf = Vec::with_capacity(self.values.len());
        let mut acc = 0.0;
        for v in &self.values {
            acc += v * dx;
            cdf.push(acc);
        }
        let n = self.values.len();
        (0..count)
            .map(|_| {
                let q = rng.random::<f64>() * acc;
                let cell = cdf.partition_point(|&c| c <= q).min(n - 1);
                wrap_f64((cell as f64 + rng.random::<f64>()) * dx)
            })
            .collect()
    }
}

/// Geodesic displacement from the centre of cell `i` to that of cell `j`,
/// computed from the integer offset so that symmetric offsets give exactly
/// opposite displacements.
fn cell_disp(i: usize, j: usize, n: usize) -> f64 {
    let mut o = (j + n - i % n) % n;
    if 2 * o >= n {
        o = o.wrapping_sub(n);
    }
    (o as i64) as f64 / n as f64
}

/// Interaction weights `w_o = k·a(|d_o|)·d_o·dx` for cell offsets `o`
/// with `d_o` the geodesic displacement between centres.
#[derive(Debug, Clone, PartialEq)]
struct Taps {
    offsets: Vec<(i64, f64)>,
}

impl Taps {
    fn new(n: usize, k: f64, radius: f64) -> Self {
        let dx = 1.0 / n as f64;
        let offsets = (0..n)
            .filter_map(|o| {
                let d = cell_disp(0, o, n);
                let w = k * hk_kernel(d.abs(), radius) * d * dx;
                (w != 0.0).then_some((o as i64, w))
            })
            .collect();
        Self { offsets }
    }

    fn apply(&self, g: &[f64], i: usize) -> f64 {
        let n = g.len();
        self.offsets
            .iter()
            .map(|&(o, w)| w * g[(i + o as usize) % n])
            .sum()
    }
}

/// Drift `k Σ_j a(|d_ij|) d_ij g_j dx + k_L a(|d_Y|) d_Y` at the centre of
/// cell `i`, by direct summation.
pub fn mf_drift(i: usize, y: f64, g: &GridDensity, params: &ModelParams) -> f64 {
    let dx = g.dx();
    let n = g.len();
    let interaction: f64 = g
        .values()
        .iter()
        .enumerate()
        .map(|(j, gj)| {
            let d = cell_disp(i, j, n);
            hk_kernel(d.abs(), params.radius) * d * gj * dx
        })
        .sum();
    let dy = geodesic_disp(g.centre(i), y);
    params.k * interaction + params.k_leader * hk_kernel(dy.abs(), params.radius) * dy
}

/// `Δx² / (2Δx(k + k_L)R + σ²)`, or `+∞` when the denominator vanishes.
pub fn cfl_max_dt(params: &ModelParams, dx: f64) -> f64 {
    let denom = 2.0 * dx * (params.k + params.k_leader) * params.radius + params.sigma * params.sigma;
    if denom > 0.0 {
        dx * dx / denom
    } else {
        f64::INFINITY
    }
}

/// Chang–Cooper weight `1/w − 1/(eʷ − 1)`.
fn chang_cooper_delta(w: f64) -> f64 {
    if w.abs() < 1e-4 {
        0.5 - w / 12.0
    } else {
        1.0 / w - 1.0 / w.exp_m1()
    }
}

/// `Σ_i r(Y, x_i) g_i dx` with `r` the squared geodesic distance.
pub fn mf_running_cost(y: f64, g: &GridDensity) -> f64 {
    let dx = g.dx();
    g.values()
        .iter()
        .enumerate()
        .map(|(i, gi)| geodesic_disp(y, g.centre(i)).powi(2) * gi * dx)
        .sum()
}

/// Scratch buffers and precomputed interaction weights for repeated steps.
#[derive(Debug, Clone)]
pub struct FokkerPlanck {
    params: ModelParams,
    n: usize,
    taps: Taps,
    drift: Vec<f64>,
    flux: Vec<f64>,
}

impl FokkerPlanck {
    pub fn new(params: ModelParams, n: usize) -> Result<Self> {
        params.validate()?;
        if n < 3 {
            return Err(Error::InvalidParameter(format!("grid needs at least 3 cells (got {n})")));
        }
        Ok(Self {
            params,
            n,
            taps: Taps::new(n, params.k, params.radius),
            drift: vec![0.0; n],
            flux: vec![0.0; n],
        })
    }

    pub fn cfl_max_dt(&self) -> f64 {
        cfl_max_dt(&self.params, 1.0 / self.n as f64)
    }

    /// One explicit Euler step of the Fokker–Planck equation with the
    /// leader frozen at `y`, in place.
    pub fn step(&mut self, g: &mut GridDensity, y: f64, dt: f64) -> Result<()> {
        let n = self.n;
        if g.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: g.len() });
        }
        let max_dt = self.cfl_max_dt();
        if dt > max_dt * (1.0 + 1e-12) {
            return Err(Error::CflViolation { dt, max_dt });
        }
        let p = &self.params;
        let dx = 1.0 / n as f64;
        let diff = 0.5 * p.sigma * p.sigma;
        for i in 0..n {
            let x = (i as f64 + 0.5) * dx;
            let dy = geodesic_disp(x, y);
            self.drift[i] = self.taps.apply(&g.values, i) + p.k_leader * hk_kernel(dy.abs(), p.radius) * dy;
        }
        for i in 0..n {
            let ip = if i + 1 == n { 0 } else { i + 1 };
            let b = 0.5 * (self.drift[i] + self.drift[ip]);
            let (gi, gp) = (g.values[i], g.values[ip]);
            self.flux[i] = if diff > 0.0 {
                let delta = chang_cooper_delta(-b * dx / diff);
                b * ((1.0 - delta) * gp + delta * gi) - diff * (gp - gi) / dx
            } else if b > 0.0 {
                b * gi
            } else {
                b * gp
            };
        }
        let ratio = dt / dx;
        let mut min = f64::INFINITY;
        for i in 0..n {
            let im = if i == 0 { n - 1 } else { i - 1 };
            let v = g.values[i] - ratio * (self.flux[i] - self.flux[im]);
            g.values[i] = v;
            min = min.min(v);
        }
        if !min.is_finite() {
            return Err(Error::NonFinite(min));
        }
        if min < -NEGATIVITY_TOL {
            return Err(Error::Negativity { min });
        }
        if min < 0.0 {
            for v in &mut g.values {
                *v = v.max(0.0);
            }
            let mass = g.mass();
            for v in &mut g.values {
                *v /= mass;
            }
        }
        Ok(())
    }
}

/// One Fokker–Planck step from `g` with the leader at `y`.
pub fn fp_step(g: &GridDensity, y: f64, params: &ModelParams, dt: f64) -> Result<GridDensity> {
    let mut solver = FokkerPlanck::new(*params, g.len())?;
    let mut out = g.clone();
    solver.step(&mut out, y, dt)?;
    Ok(out)
}

/// Follower density and leader position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldState {
    pub density: GridDensity,
    pub leader: f64,
}

/// Density and leader at every grid node plus the leader increments.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldTrajectory {
    pub densities: Vec<GridDensity>,
    pub leader: Vec<f64>,
    pub dby: Vec<f64>,
    pub grid: TimeGrid,
}

/// The discretised mean-field system as a [`ControlledSystem`]: only the
/// leader is noisy, so the score functions are unchanged.
#[derive(Debug, Clone)]
pub struct MeanFieldSystem {
    pub params: ModelParams,
    pub dt: f64,
    pub cells: usize,
    pub running_cost: RunningCost,
    solver: FokkerPlanck,
}

impl MeanFieldSystem {
    pub fn new(params: ModelParams, dt: f64, cells: usize) -> Result<Self> {
        let solver = FokkerPlanck::new(params, cells)?;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be > 0 (got {dt})")));
        }
        let max_dt = solver.cfl_max_dt();
        if dt > max_dt * (1.0 + 1e-12) {
            return Err(Error::CflViolation { dt, max_dt });
        }
        Ok(Self {
            params,
            dt,
            cells,
            running_cost: RunningCost::Consensus,
            solver,
        })
    }

    pub fn with_running_cost(mut self, running_cost: RunningCost) -> Self {
        self.running_cost = running_cost;
        self
    }

    /// Per step: running cost at the current state, density step with the
    /// leader at the start of the step, then the leader's Euler–Maruyama
    /// step.
    fn integrate<F>(
        &self,
        init: &MeanFieldState,
        controls: &[f64],
        seed: &SeedSpec,
        mut observe: F,
    ) -> Result<Rollout<MeanFieldState>>
    where
        F: FnMut(&GridDensity, f64),
    {
        let mut solver = self.solver.clone();
        let mut g = init.density.clone();
        g.check()?;
        if g.len() != self.cells {
            return Err(Error::DimensionMismatch {
                expected: self.cells,
                got: g.len(),
            });
        }
        let mut y = init.leader;
        let sqrt_dt = self.dt.sqrt();
        let mut rng: ChaCha8Rng = seed.rng(Stream::LeaderNoise);
        let mut running = Vec::with_capacity(controls.len());
        let mut dby = Vec::with_capacity(controls.len());
        for &u in controls {
            observe(&g, y);
            running.push(match self.running_cost {
                RunningCost::Consensus => mf_running_cost(y, &g) * self.dt,
                RunningCost::Zero => 0.0,
            });
            solver.step(&mut g, y, self.dt)?;
            let db = sqrt_dt * rng.sample::<f64, _>(StandardNormal);
            y = wrap_f64(y + u * self.dt + self.params.sigma * db);
            dby.push(db);
        }
        observe(&g, y);
        Ok(Rollout {
            final_state: MeanFieldState { density: g, leader: y },
            running,
            dby,
        })
    }
}

impl ControlledSystem for MeanFieldSystem {
    type State = MeanFieldState;

    fn sigma(&self) -> f64 {
        self.params.sigma
    }

    fn lambda(&self) -> f64 {
        self.params.lambda
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn rollout(&self, init: &MeanFieldState, controls: &[f64], seed: &SeedSpec) -> Result<Rollout<MeanFieldState>> {
        self.integrate(init, controls, seed, |_, _| {})
    }

    fn trajectory(
        &self,
        init: &MeanFieldState,
        controls: &[f64],
        seed: &SeedSpec,
    ) -> Result<Traced<MeanFieldState>> {
        let mut states = Vec::with_capacity(controls.len() + 1);
        let rollout = self.integrate(init, controls, seed, |g, y| {
            states.push(MeanFieldState {
                density: g.clone(),
                leader: y,
            })
        })?;
        Ok((rollout, states))
    }

    fn consensus_fraction(&self, state: &MeanFieldState) -> f64 {
        state.density.mass_within(state.leader, self.params.radius)
    }
}

/// Simulates the coupled density–leader system, keeping every node.
pub fn simulate_mf(
    system: &MeanFieldSystem,
    grid: &TimeGrid,
    control: &PiecewiseConstantControl,
    g0: &GridDensity,
    y0: f64,
    seed: &SeedSpec,
) -> Result<MeanFieldTrajectory> {
    if (grid.dt - system.dt).abs() > 1e-15 * grid.dt.max(1.0) {
        return Err(Error::InvalidParameter(format!(
            "grid step {} differs from the system step {}",
            grid.dt, system.dt
        )));
    }
    let controls = control.basis.schedule(grid)?.controls(&control.coeffs)?;
    let init = MeanFieldState {
        density: g0.clone(),
        leader: wrap_f64(y0),
    };
    let mut densities = Vec::with_capacity(grid.steps + 1);
    let mut leader = Vec::with_capacity(grid.steps + 1);
    let rollout = system.integrate(&init, &controls, seed, |g, y| {
        densities.push(g.clone());
        leader.push(y);
    })?;
    Ok(MeanFieldTrajectory {
        densities,
        leader,
        dby: rollout.dby,
        grid: *grid,
    })
}
