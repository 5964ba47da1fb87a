//! The interface shared by the finite-N particle system and the discretised
//! mean-field system, so that estimators and optimisers run unchanged on
//! either.

use crate::error::Result;
use crate::rng::SeedSpec;

/// A rollout together with every intermediate state.
pub type Traced<S> = (Rollout<S>, Vec<S>);

/// Outcome of integrating one path.
#[derive(Debug, Clone)]
pub struct Rollout<S> {
    pub final_state: S,
    /// Running-cost increments `r(state_j)·dt`, one per step.
    pub running: Vec<f64>,
    /// Leader Brownian increments, one per step.
    pub dby: Vec<f64>,
}

impl<S> Rollout<S> {
    /// `φ_T = Σ_j r(state_j)·dt` (left Riemann).
    pub fn phi(&self) -> f64 {
        self.running.iter().sum()
    }
}

/// A controlled system whose only control enters the leader's drift and
/// whose only noise seen by the score functions is the leader's.
pub trait ControlledSystem: Sync {
    type State: Clone + Send + Sync;

    fn sigma(&self) -> f64;
    fn lambda(&self) -> f64;
    fn dt(&self) -> f64;

    /// Integrates `controls.len()` Euler steps from `init`, applying leader
    /// control `controls[j]` on step `j`.
    fn rollout(
        &self,
        init: &Self::State,
        controls: &[f64],
        seed: &SeedSpec,
    ) -> Result<Rollout<Self::State>>;

    /// As [`ControlledSystem::rollout`], also returning the state at every
    /// node `0..=controls.len()`.
    fn trajectory(
        &self,
        init: &Self::State,
        controls: &[f64],
        seed: &SeedSpec,
    ) -> Result<Traced<Self::State>>;

    /// Fraction of follower mass within the interaction radius of the leader.
    fn consensus_fraction(&self, state: &Self::State) -> f64;
}
