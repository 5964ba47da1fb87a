//! Noisy Hegselmann–Krause followers steered by one controlled leader,
//! integrated with Euler–Maruyama on the unit torus.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::control::PiecewiseConstantControl;
use crate::error::{Error, Result};
use crate::params::{ModelParams, TimeGrid};
use crate::rng::{SeedSpec, Stream};
use crate::system::{ControlledSystem, Rollout, Traced};
use crate::torus::{geodesic_disp, wrap_f64};

/// Bounded-confidence indicator: 1 if `r ≤ radius`, else 0.
#[inline]
pub fn hk_kernel(r: f64, radius: f64) -> f64 {
    if r <= radius {
        1.0
    } else {
        0.0
    }
}

/// Interaction weight `a(r)`.
///
/// The indicator is the model of record. `Smoothed` replaces the jump at
/// `radius` by a cosine ramp over `[radius - width, radius + width]`, which
/// makes the drift Lipschitz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Kernel {
    Indicator,
    Smoothed { width: f64 },
}

impl Kernel {
    #[inline]
    pub fn weight(&self, r: f64, radius: f64) -> f64 {
        match *self {
            Kernel::Indicator => hk_kernel(r, radius),
            Kernel::Smoothed { width } => {
                if r <= radius - width {
                    1.0
                } else if r >= radius + width {
                    0.0
                } else {
                    let s = (r - (radius - width)) / (2.0 * width);
                    0.5 * (1.0 + (std::f64::consts::PI * s).cos())
                }
            }
        }
    }
}

/// Follower drift at `x`: `k·(1/N)Σ_j a(|d_j|)d_j + k_L·a(|d_Y|)d_Y` with
/// geodesic displacements. The sum includes `x`'s own atom.
pub fn hk_drift(x: f64, leader: f64, followers: &[f64], params: &ModelParams) -> f64 {
    kernel_drift(x, leader, followers, params, Kernel::Indicator)
}

pub fn kernel_drift(
    x: f64,
    leader: f64,
    followers: &[f64],
    params: &ModelParams,
    kernel: Kernel,
) -> f64 {
    let mut interaction = 0.0;
    if !followers.is_empty() {
        for &xj in followers {
            let d = geodesic_disp(x, xj);
            interaction += kernel.weight(d.abs(), params.radius) * d;
        }
        interaction *= params.k / followers.len() as f64;
    }
    let dy = geodesic_disp(x, leader);
    interaction + params.k_leader * kernel.weight(dy.abs(), params.radius) * dy
}

/// `(1/N) Σ_j |Y ⊖ X_j|²`; zero when there are no followers.
pub fn running_cost(leader: f64, followers: &[f64]) -> f64 {
    if followers.is_empty() {
        return 0.0;
    }
    followers
        .iter()
        .map(|&x| {
            let d = geodesic_disp(leader, x);
            d * d
        })
        .sum::<f64>()
        / followers.len() as f64
}

/// Which running cost a system accumulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunningCost {
    /// Mean squared geodesic distance from the leader to the followers.
    #[default]
    Consensus,
    /// `r ≡ 0`: only the control penalty remains.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub followers: Vec<f64>,
    pub leader: f64,
}

impl SystemState {
    pub fn new(followers: Vec<f64>, leader: f64) -> Result<Self> {
        for &x in followers.iter().chain(std::iter::once(&leader)) {
            if !(0.0..1.0).contains(&x) {
                return Err(Error::InvalidParameter(format!(
                    "position {x} is not a torus point in [0, 1)"
                )));
            }
        }
        Ok(Self { followers, leader })
    }

    /// Fraction of followers within geodesic distance `radius` of the leader.
    pub fn fraction_near_leader(&self, radius: f64) -> f64 {
        if self.followers.is_empty() {
            return 0.0;
        }
        let near = self
            .followers
            .iter()
            .filter(|&&x| geodesic_disp(self.leader, x).abs() <= radius)
            .count();
        near as f64 / self.followers.len() as f64
    }
}

/// One simulated path: the state at every grid node and the leader's
/// Brownian increments.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBundle {
    pub states: Vec<SystemState>,
    pub dby: Vec<f64>,
    pub grid: TimeGrid,
    pub params: ModelParams,
}

/// Sorted view of the followers used to evaluate all indicator-kernel drifts
/// in `O(N)` per step after an insertion sort of a nearly sorted order.
#[derive(Debug, Default)]
struct DriftWorkspace {
    order: Vec<usize>,
    sorted: Vec<f64>,
    lifted: Vec<f64>,
    prefix: Vec<f64>,
    drift: Vec<f64>,
}

impl DriftWorkspace {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            sorted: vec![0.0; n],
            lifted: vec![0.0; 3 * n],
            prefix: vec![0.0; 3 * n + 1],
            drift: vec![0.0; n],
        }
    }

    /// Fills `self.drift[i]` with the interaction part `k·(1/N)Σ_j a d_j`.
    fn indicator_interactions(&mut self, x: &[f64], k: f64, radius: f64) {
        let n = x.len();
        if n == 0 {
            return;
        }
        // insertion sort keeps the previous order as a warm start
        for (s, &i) in self.sorted.iter_mut().zip(&self.order) {
            *s = x[i];
        }
        for i in 1..n {
            let key = self.sorted[i];
            if self.sorted[i - 1] <= key {
                continue;
            }
            let cur = self.order[i];
            let mut j = i;
            while j > 0 && self.sorted[j - 1] > key {
                self.sorted[j] = self.sorted[j - 1];
                self.order[j] = self.order[j - 1];
                j -= 1;
            }
            self.sorted[j] = key;
            self.order[j] = cur;
        }
        // prefix sums over the lifted copies s-1, s, s+1
        for (b, shift) in [-1.0, 0.0, 1.0].into_iter().enumerate() {
            for i in 0..n {
                self.lifted[b * n + i] = self.sorted[i] + shift;
            }
        }
        self.prefix[0] = 0.0;
        for idx in 0..3 * n {
            self.prefix[idx + 1] = self.prefix[idx] + self.lifted[idx];
        }
        let closed_upper = radius < 0.5;
        let (mut lo, mut hi) = (0usize, 0usize);
        let scale = k / n as f64;
        let lifted = &self.lifted;
        for i in 0..n {
            let c = self.sorted[i];
            let lower = c - radius;
            let upper = c + radius;
            while lo < 3 * n && lifted[lo] < lower {
                lo += 1;
            }
            if hi < lo {
                hi = lo;
            }
            if closed_upper {
                while hi < 3 * n && lifted[hi] <= upper {
                    hi += 1;
                }
            } else {
                while hi < 3 * n && lifted[hi] < upper {
                    hi += 1;
                }
            }
            let count = (hi - lo) as f64;
            let sum = self.prefix[hi] - self.prefix[lo];
            self.drift[self.order[i]] = scale * (sum - count * c);
        }
    }
}

/// The finite-N leader–follower system as a [`ControlledSystem`].
#[derive(Debug, Clone)]
pub struct ParticleSystem {
    pub params: ModelParams,
    pub dt: f64,
    pub kernel: Kernel,
    pub running_cost: RunningCost,
}

impl ParticleSystem {
    pub fn new(params: ModelParams, dt: f64) -> Result<Self> {
        params.validate()?;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be > 0 (got {dt})")));
        }
        Ok(Self {
            params,
            dt,
            kernel: Kernel::Indicator,
            running_cost: RunningCost::Consensus,
        })
    }

    pub fn with_kernel(mut self, kernel: Kernel) -> Self {
        self.kernel = kernel;
        self
    }

    pub fn with_running_cost(mut self, running_cost: RunningCost) -> Self {
        self.running_cost = running_cost;
        self
    }

    fn check_state(&self, state: &SystemState) -> Result<()> {
        if state.followers.len() != self.params.followers {
            return Err(Error::DimensionMismatch {
                expected: self.params.followers,
                got: state.followers.len(),
            });
        }
        Ok(())
    }

    /// Core Euler–Maruyama loop. `observe(j, state)` sees the state at every
    /// node `j = 0..=controls.len()`.
    fn integrate<F>(
        &self,
        init: &SystemState,
        controls: &[f64],
        seed: &SeedSpec,
        streams: Option<&[u64]>,
        mut observe: F,
    ) -> Result<Rollout<SystemState>>
    where
        F: FnMut(usize, &[f64], f64),
    {
        self.check_state(init)?;
        let p = &self.params;
        let n = p.followers;
        let dt = self.dt;
        let sqrt_dt = dt.sqrt();
        let mut x = init.followers.clone();
        let mut y = init.leader;
        let mut follower_rngs: Vec<ChaCha8Rng> = match streams {
            Some(ids) => {
                if ids.len() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        got: ids.len(),
                    });
                }
                ids.iter().map(|&i| seed.rng(Stream::FollowerNoise(i))).collect()
            }
            None => (0..n as u64).map(|i| seed.rng(Stream::FollowerNoise(i))).collect(),
        };
        let mut leader_rng = seed.rng(Stream::LeaderNoise);
        let mut ws = DriftWorkspace::new(n);
        let mut dby = Vec::with_capacity(controls.len());
        let mut running = Vec::with_capacity(controls.len());

        for (j, &u) in controls.iter().enumerate() {
            observe(j, &x, y);
            running.push(match self.running_cost {
                RunningCost::Consensus => running_cost(y, &x) * dt,
                RunningCost::Zero => 0.0,
            });
            match self.kernel {
                Kernel::Indicator => ws.indicator_interactions(&x, p.k, p.radius),
                kernel => {
                    for i in 0..n {
                        ws.drift[i] = kernel_drift(x[i], y, &x, &ModelParams { k_leader: 0.0, ..*p }, kernel);
                    }
                }
            }
            for i in 0..n {
                let dyl = geodesic_disp(x[i], y);
                let b = ws.drift[i] + p.k_leader * self.kernel.weight(dyl.abs(), p.radius) * dyl;
                let xi: f64 = follower_rngs[i].sample(StandardNormal);
                x[i] = wrap_f64(x[i] + b * dt + p.sigma * sqrt_dt * xi);
            }
            let db = sqrt_dt * leader_rng.sample::<f64, _>(StandardNormal);
            y = wrap_f64(y + u * dt + p.sigma * db);
            dby.push(db);
        }
        observe(controls.len(), &x, y);
        Ok(Rollout {
            final_state: SystemState {
                followers: x,
                leader: y,
            },
            running,
            dby,
        })
    }
}

impl ParticleSystem {
    /// Like [`ControlledSystem::trajectory`], but follower `i` draws its
    /// noise from stream `FollowerNoise(streams[i])` instead of `i`.
    pub fn trajectory_with_streams(
        &self,
        init: &SystemState,
        controls: &[f64],
        seed: &SeedSpec,
        streams: &[u64],
    ) -> Result<Vec<SystemState>> {
        let mut states = Vec::with_capacity(controls.len() + 1);
        self.integrate(init, controls, seed, Some(streams), |_, x, y| {
            states.push(SystemState {
                followers: x.to_vec(),
                leader: y,
            })
        })?;
        Ok(states)
    }
}

impl ControlledSystem for ParticleSystem {
    type State = SystemState;

    fn sigma(&self) -> f64 {
        self.params.sigma
    }

    fn lambda(&self) -> f64 {
        self.params.lambda
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn rollout(
        &self,
        init: &SystemState,
        controls: &[f64],
        seed: &SeedSpec,
    ) -> Result<Rollout<SystemState>> {
        self.integrate(init, controls, seed, None, |_, _, _| {})
    }

    fn trajectory(
        &self,
        init: &SystemState,
        controls: &[f64],
        seed: &SeedSpec,
    ) -> Result<Traced<SystemState>> {
        let mut states = Vec::with_capacity(controls.len() + 1);
        let rollout = self.integrate(init, controls, seed, None, |_, x, y| {
            states.push(SystemState {
                followers: x.to_vec(),
                leader: y,
            })
        })?;
        Ok((rollout, states))
    }

    fn consensus_fraction(&self, state: &SystemState) -> f64 {
        state.fraction_near_leader(self.params.radius)
    }
}

/// Simulates one path of the leader–follower system under `control`,
/// keeping every state and the leader's Brownian increments.
pub fn simulate(
    params: &ModelParams,
    grid: &TimeGrid,
    control: &PiecewiseConstantControl,
    init: &SystemState,
    seed: &SeedSpec,
) -> Result<TrajectoryBundle> {
    simulate_with(&ParticleSystem::new(*params, grid.dt)?, grid, control, init, seed)
}

pub fn simulate_with(
    system: &ParticleSystem,
    grid: &TimeGrid,
    control: &PiecewiseConstantControl,
    init: &SystemState,
    seed: &SeedSpec,
) -> Result<TrajectoryBundle> {
    if !(grid.dt > 0.0) {
        return Err(Error::InvalidParameter(format!("dt must be > 0 (got {})", grid.dt)));
    }
    let schedule = control.basis.schedule(grid)?;
    let controls = schedule.controls(&control.coeffs)?;
    let mut states = Vec::with_capacity(grid.steps + 1);
    let rollout = system.integrate(init, &controls, seed, None, |_, x, y| {
        states.push(SystemState {
            followers: x.to_vec(),
            leader: y,
        })
    })?;
    Ok(TrajectoryBundle {
        states,
        dby: rollout.dby,
        grid: *grid,
        params: system.params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::Basis;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn params(k: f64, k_leader: f64, sigma: f64, n: usize) -> ModelParams {
        ModelParams {
            k,
            k_leader,
            sigma,
            followers: n,
            ..ModelParams::hegselmann_krause()
        }
    }

    #[test]
    fn kernel_examples() {
        assert_eq!(hk_kernel(0.10, 0.15), 1.0);
        assert_eq!(hk_kernel(0.20, 0.15), 0.0);
        assert_eq!(hk_kernel(0.15, 0.15), 1.0);
    }

    #[test]
    fn smoothed_kernel_ramps() {
        let k = Kernel::Smoothed { width: 0.02 };
        assert_eq!(k.weight(0.12, 0.15), 1.0);
        assert_eq!(k.weight(0.18, 0.15), 0.0);
        assert_abs_diff_eq!(k.weight(0.15, 0.15), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn drift_examples() {
        let p = params(10.0, 5.0, 0.05, 1);
        assert_eq!(hk_drift(0.3, 0.8, &[0.3], &p), 0.0);
        assert_abs_diff_eq!(hk_drift(0.3, 0.4, &[0.3], &p), 0.5, epsilon = 1e-12);
        let p2 = params(10.0, 5.0, 0.05, 2);
        assert_eq!(hk_drift(0.3, 0.8, &[0.3, 0.5], &p2), 0.0);
    }

    #[test]
    fn running_cost_examples() {
        assert_eq!(running_cost(0.5, &[0.5, 0.5]), 0.0);
        assert_abs_diff_eq!(running_cost(0.0, &[0.5]), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(running_cost(0.1, &[0.2, 0.9]), 0.025, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn fast_drift_matches_direct_sum(
            xs in proptest::collection::vec(0.0f64..1.0, 1..60),
            radius in 0.01f64..0.5,
        ) {
            let p = ModelParams { radius, followers: xs.len(), ..params(7.0, 0.0, 0.0, 1) };
            let mut ws = DriftWorkspace::new(xs.len());
            ws.indicator_interactions(&xs, p.k, p.radius);
            for (i, &x) in xs.iter().enumerate() {
                let direct = hk_drift(x, 0.0, &xs, &ModelParams { k_leader: 0.0, ..p });
                prop_assert!((ws.drift[i] - direct).abs() < 1e-11, "{} vs {}", ws.drift[i], direct);
            }
        }
    }

    #[test]
    fn fast_drift_handles_antipodal_radius() {
        let xs = [0.0, 0.5, 0.25, 0.75];
        let p = ModelParams { radius: 0.5, followers: 4, ..params(1.0, 0.0, 0.0, 4) };
        let mut ws = DriftWorkspace::new(4);
        ws.indicator_interactions(&xs, p.k, p.radius);
        for (i, &x) in xs.iter().enumerate() {
            assert_abs_diff_eq!(ws.drift[i], hk_drift(x, 0.0, &xs, &ModelParams { k_leader: 0.0, ..p }), epsilon = 1e-12);
        }
    }

    #[test]
    fn frozen_without_drift_or_noise() {
        let p = params(10.0, 5.0, 0.0, 3);
        let grid = TimeGrid::from_steps(1.0, 50).unwrap();
        let control = PiecewiseConstantControl::zero(Basis::uniform(1.0, 5).unwrap());
        let init = SystemState::new(vec![0.1, 0.4, 0.7], 0.95).unwrap();
        let traj = simulate(&p, &grid, &control, &init, &SeedSpec::new(3)).unwrap();
        assert_eq!(traj.states.len(), 51);
        assert_eq!(traj.dby.len(), 50);
        assert!(traj.states.iter().all(|s| *s == init));
    }

    #[test]
    fn deterministic_leader_integration() {
        let p = params(10.0, 5.0, 0.0, 0);
        let grid = TimeGrid::from_steps(1.0, 64).unwrap();
        let control =
            PiecewiseConstantControl::new(Basis::uniform(1.0, 1).unwrap(), vec![0.375]).unwrap();
        let init = SystemState::new(vec![], 0.8).unwrap();
        let traj = simulate(&p, &grid, &control, &init, &SeedSpec::new(3)).unwrap();
        assert_abs_diff_eq!(traj.states[64].leader, wrap_f64(0.8 + 0.375), epsilon = 1e-12);
    }

    #[test]
    fn deterministic_given_seed() {
        let p = ModelParams { followers: 20, ..ModelParams::hegselmann_krause() };
        let grid = TimeGrid::from_steps(1.0, 100).unwrap();
        let control =
            PiecewiseConstantControl::new(Basis::uniform(1.0, 5).unwrap(), vec![0.5, -1.0, 0.0, 1.0, 2.0])
                .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<f64> = (0..20).map(|_| rand::Rng::random(&mut rng)).collect();
        let init = SystemState::new(xs, 0.8).unwrap();
        let a = simulate(&p, &grid, &control, &init, &SeedSpec::new(9)).unwrap();
        let b = simulate(&p, &grid, &control, &init, &SeedSpec::new(9)).unwrap();
        let c = simulate(&p, &grid, &control, &init, &SeedSpec::new(10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.dby, c.dby);
        for s in &a.states {
            assert!(s.followers.iter().all(|x| (0.0..1.0).contains(x)));
        }
    }

    #[test]
    fn rejects_mismatched_state_and_short_control() {
        let p = ModelParams { followers: 3, ..ModelParams::hegselmann_krause() };
        let grid = TimeGrid::from_steps(1.0, 10).unwrap();
        let control = PiecewiseConstantControl::zero(Basis::uniform(1.0, 2).unwrap());
        let init = SystemState::new(vec![0.1], 0.2).unwrap();
        assert!(simulate(&p, &grid, &control, &init, &SeedSpec::new(0)).is_err());
        let short = PiecewiseConstantControl::zero(Basis::uniform(0.5, 2).unwrap());
        let init = SystemState::new(vec![0.1, 0.2, 0.3], 0.2).unwrap();
        assert!(matches!(
            simulate(&p, &grid, &short, &init, &SeedSpec::new(0)),
            Err(Error::ControlCoverage { .. })
        ));
    }
}
