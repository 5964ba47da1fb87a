//! Safeguarded Newton iteration over control coefficients and
//! receding-horizon ("Markov") re-planning.
//!
//! A [`CostOracle`] returns cost, gradient and Hessian at a coefficient
//! vector. The Monte Carlo oracle reuses one seed for every evaluation of a
//! solve, so successive iterates are compared under common random numbers.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::control::StepSchedule;
use crate::error::{Error, Result};
use crate::estimators::{
    evaluate_batch, simulate_batch, EstimateWithError, EstimatorOptions, Evaluation, GradientEstimate,
    HessianEstimate,
};
use crate::rng::SeedSpec;
use crate::system::ControlledSystem;

/// Cost, gradient and Hessian of `J` as a function of the coefficients.
pub trait CostOracle: Sync {
    fn dim(&self) -> usize;
    fn evaluate(&self, a: &[f64]) -> Result<Evaluation>;
}

/// Score-function estimates from `n_paths` paths with a fixed seed.
pub struct MonteCarloOracle<'a, S: ControlledSystem> {
    pub system: &'a S,
    pub init: S::State,
    pub schedule: StepSchedule,
    pub n_paths: usize,
    pub seed: SeedSpec,
    pub options: EstimatorOptions,
}

impl<S: ControlledSystem> CostOracle for MonteCarloOracle<'_, S> {
    fn dim(&self) -> usize {
        self.schedule.intervals()
    }

    fn evaluate(&self, a: &[f64]) -> Result<Evaluation> {
        let batch = simulate_batch(self.system, &self.init, &self.schedule, a, self.n_paths, &self.seed)?;
        evaluate_batch(&batch, &self.options)
    }
}

/// Closed forms for `r ≡ 0`: `J = (λ/2)Σa_k²|I_k|`, `∇J = λ(a_k|I_k|)`,
/// `H = λ·diag(|I_k|)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactQuadraticOracle {
    pub lambda: f64,
    pub lengths: Vec<f64>,
}

impl CostOracle for ExactQuadraticOracle {
    fn dim(&self) -> usize {
        self.lengths.len()
    }

    fn evaluate(&self, a: &[f64]) -> Result<Evaluation> {
        let m = self.dim();
        if a.len() != m {
            return Err(Error::DimensionMismatch { expected: m, got: a.len() });
        }
        let cost = 0.5 * self.lambda * a.iter().zip(&self.lengths).map(|(a, l)| a * a * l).sum::<f64>();
        let grad = a.iter().zip(&self.lengths).map(|(a, l)| self.lambda * a * l).collect();
        let hess = DMatrix::from_diagonal(&DVector::from_iterator(m, self.lengths.iter().map(|l| self.lambda * l)));
        Ok(Evaluation {
            a: a.to_vec(),
            cost: EstimateWithError::exact(cost),
            path_costs: Vec::new(),
            grad: GradientEstimate {
                mean: grad,
                std_error: vec![0.0; m],
            },
            hess: HessianEstimate {
                mean: hess,
                std_error: DMatrix::zeros(m, m),
            },
        })
    }
}

/// Central finite differences of the noiseless (`σ = 0`) cost.
pub struct DeterministicOracle<'a, S: ControlledSystem> {
    pub system: &'a S,
    pub init: S::State,
    pub schedule: StepSchedule,
    /// Finite-difference step.
    pub step: f64,
}

impl<'a, S: ControlledSystem> DeterministicOracle<'a, S> {
    pub fn new(system: &'a S, init: S::State, schedule: StepSchedule, step: f64) -> Result<Self> {
        if system.sigma() != 0.0 {
            return Err(Error::InvalidParameter(
                "the deterministic oracle needs sigma = 0".into(),
            ));
        }
        if !(step > 0.0) {
            return Err(Error::InvalidParameter(format!("finite-difference step must be > 0 (got {step})")));
        }
        Ok(Self {
            system,
            init,
            schedule,
            step,
        })
    }

    pub fn cost(&self, a: &[f64]) -> Result<f64> {
        let controls = self.schedule.controls(a)?;
        let r = self.system.rollout(&self.init, &controls, &SeedSpec::new(0))?;
        Ok(r.phi() + self.schedule.control_cost(a, self.system.lambda()))
    }
}

impl<S: ControlledSystem> CostOracle for DeterministicOracle<'_, S> {
    fn dim(&self) -> usize {
        self.schedule.intervals()
    }

    fn evaluate(&self, a: &[f64]) -> Result<Evaluation> {
        let m = self.dim();
        let h = self.step;
        let j0 = self.cost(a)?;
        let shifted = |moves: &[(usize, f64)]| -> Result<f64> {
            let mut b = a.to_vec();
            for &(k, d) in moves {
                b[k] += d;
            }
            self.cost(&b)
        };
        let mut plus = vec![0.0; m];
        let mut minus = vec![0.0; m];
        for k in 0..m {
            plus[k] = shifted(&[(k, h)])?;
            minus[k] = shifted(&[(k, -h)])?;
        }
        let grad: Vec<f64> = (0..m).map(|k| (plus[k] - minus[k]) / (2.0 * h)).collect();
        let mut hess = DMatrix::zeros(m, m);
        for k in 0..m {
            hess[(k, k)] = (plus[k] - 2.0 * j0 + minus[k]) / (h * h);
            for l in k + 1..m {
                let v = (shifted(&[(k, h), (l, h)])? - shifted(&[(k, h), (l, -h)])?
                    - shifted(&[(k, -h), (l, h)])?
                    + shifted(&[(k, -h), (l, -h)])?)
                    / (4.0 * h * h);
                hess[(k, l)] = v;
                hess[(l, k)] = v;
            }
        }
        Ok(Evaluation {
            a: a.to_vec(),
            cost: EstimateWithError::exact(j0),
            path_costs: vec![j0],
            grad: GradientEstimate {
                mean: grad,
                std_error: vec![0.0; m],
            },
            hess: HessianEstimate {
                mean: hess,
                std_error: DMatrix::zeros(m, m),
            },
        })
    }
}

/// How a solve evaluates cost and derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleMode {
    MonteCarlo {
        n_paths: usize,
        #[serde(default)]
        estimator: EstimatorOptions,
    },
    /// Finite differences of the `σ = 0` cost.
    Deterministic { step: f64 },
    /// Closed forms, valid only when the running cost is zero.
    ExactQuadratic,
}

impl OracleMode {
    pub fn monte_carlo(n_paths: usize) -> Self {
        OracleMode::MonteCarlo {
            n_paths,
            estimator: EstimatorOptions::default(),
        }
    }
}

/// Builds the oracle for the problem started at `init` on `schedule`.
pub fn build_oracle<'a, S: ControlledSystem>(
    mode: &OracleMode,
    system: &'a S,
    init: S::State,
    schedule: StepSchedule,
    seed: SeedSpec,
) -> Result<Box<dyn CostOracle + 'a>> {
    Ok(match *mode {
        OracleMode::MonteCarlo { n_paths, estimator } => {
            if n_paths < 2 {
                return Err(Error::InvalidParameter("need at least two paths".into()));
            }
            Box::new(MonteCarloOracle {
                system,
                init,
                schedule,
                n_paths,
                seed,
                options: estimator,
            })
        }
        OracleMode::Deterministic { step } => Box::new(DeterministicOracle::new(system, init, schedule, step)?),
        OracleMode::ExactQuadratic => Box::new(ExactQuadraticOracle {
            lambda: system.lambda(),
            lengths: schedule.interval_lengths(),
        }),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewtonOptions {
    /// Stop when an accepted step changes `J` by less than this; `None` means
    /// `1e-4·(1 + |J(a^0)|)`.
    pub tol: Option<f64>,
    pub max_iter: usize,
    /// Step halvings tried at each Levenberg shift.
    pub max_halvings: usize,
    /// Levenberg shifts tried before giving up.
    pub max_shifts: usize,
    /// A trial is accepted if `J_trial ≤ J + descent_se·SE(J_trial − J)`.
    pub descent_se: f64,
    /// Largest component of a shifted (`τ > 0`) step; longer steps are
    /// scaled down. Unshifted Newton steps are never capped.
    pub max_step: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: None,
            max_iter: 200,
            max_halvings: 8,
            max_shifts: 16,
            descent_se: 3.0,
            max_step: 1.0,
        }
    }
}

/// One row of the iteration log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewtonIterate {
    pub iter: usize,
    pub a: Vec<f64>,
    pub cost: f64,
    pub cost_se: f64,
    pub grad_norm: f64,
    pub grad_se: Vec<f64>,
    pub hess_diag: Vec<f64>,
    /// Levenberg shift of the step that produced this iterate.
    pub damping: f64,
    pub halvings: usize,
}

#[derive(Debug, Clone)]
pub struct NewtonReport {
    pub iterates: Vec<NewtonIterate>,
    pub converged: bool,
    pub final_a: Vec<f64>,
    pub final_evaluation: Evaluation,
    pub tol: f64,
    /// Number of oracle evaluations, including rejected trials.
    pub evaluations: usize,
}

fn record(iter: usize, e: &Evaluation, damping: f64, halvings: usize) -> NewtonIterate {
    NewtonIterate {
        iter,
        a: e.a.clone(),
        cost: e.cost.mean,
        cost_se: e.cost.std_error,
        grad_norm: e.grad.mean.iter().map(|g| g * g).sum::<f64>().sqrt(),
        grad_se: e.grad.std_error.clone(),
        hess_diag: e.hess.mean.diagonal().iter().cloned().collect(),
        damping,
        halvings,
    }
}

struct Step {
    trial: Evaluation,
    damping: f64,
    halvings: usize,
    evaluations: usize,
}

/// Levenberg-shifted Newton step with step halving; the first trial that
/// does not raise `J` beyond the noise allowance is accepted. A shift that
/// barely makes `H + τI` positive definite leaves it nearly singular, hence
/// the cap on shifted steps.
fn safeguarded_step(oracle: &dyn CostOracle, cur: &Evaluation, opts: &NewtonOptions) -> Result<Step> {
    let m = cur.a.len();
    let h = &cur.hess.mean;
    let g = DVector::from_column_slice(&cur.grad.mean);
    let max_diag = h.diagonal().iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let base = 1e-4 * if max_diag > 0.0 { max_diag } else { 1.0 };
    // first shift: just past the most negative eigenvalue
    let lambda_min = h.clone().symmetric_eigen().eigenvalues.min();
    let first_shift = (-lambda_min).max(0.0) + base;
    let mut tau = 0.0;
    let mut evaluations = 0;
    for _ in 0..=opts.max_shifts {
        let shifted = h + DMatrix::identity(m, m) * tau;
        if let Some(chol) = shifted.cholesky() {
            let mut step = -chol.solve(&g);
            let longest = step.amax();
            if tau > 0.0 && longest > opts.max_step {
                step *= opts.max_step / longest;
            }
            for halvings in 0..=opts.max_halvings {
                let a: Vec<f64> = cur.a.iter().zip(step.iter()).map(|(a, s)| a + s).collect();
                let trial = oracle.evaluate(&a)?;
                evaluations += 1;
                let allowance = opts.descent_se * trial.difference_std_error(cur);
                if trial.cost.mean <= cur.cost.mean + allowance {
                    return Ok(Step {
                        trial,
                        damping: tau,
                        halvings,
                        evaluations,
                    });
                }
                step *= 0.5;
            }
        }
        tau = if tau == 0.0 { first_shift } else { tau * 10.0 };
    }
    Err(Error::SingularHessian { shift: tau })
}

/// Safeguarded Newton iteration from `a0`; stops when an accepted step
/// changes `J` by less than the tolerance.
pub fn newton_solve(oracle: &dyn CostOracle, a0: &[f64], opts: &NewtonOptions) -> Result<NewtonReport> {
    if a0.len() != oracle.dim() {
        return Err(Error::DimensionMismatch {
            expected: oracle.dim(),
            got: a0.len(),
        });
    }
    if !(opts.max_step > 0.0) {
        return Err(Error::InvalidParameter(format!("max_step must be > 0 (got {})", opts.max_step)));
    }
    if let Some(tol) = opts.tol {
        if !(tol > 0.0) {
            return Err(Error::InvalidParameter(format!("tolerance must be > 0 (got {tol})")));
        }
    }
    let mut cur = oracle.evaluate(a0)?;
    let mut evaluations = 1;
    let tol = opts.tol.unwrap_or(1e-4 * (1.0 + cur.cost.mean.abs()));
    let mut iterates = vec![record(0, &cur, 0.0, 0)];
    let mut converged = false;
    for iter in 1..=opts.max_iter {
        let step = safeguarded_step(oracle, &cur, opts)?;
        evaluations += step.evaluations;
        let change = (step.trial.cost.mean - cur.cost.mean).abs();
        iterates.push(record(iter, &step.trial, step.damping, step.halvings));
        log::debug!("newton iter {iter}: J = {:.6e}, damping {:.1e}", step.trial.cost.mean, step.damping);
        cur = step.trial;
        if change < tol {
            converged = true;
            break;
        }
    }
    Ok(NewtonReport {
        iterates,
        converged,
        final_a: cur.a.clone(),
        final_evaluation: cur,
        tol,
        evaluations,
    })
}

/// Options for receding-horizon control.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkovOptions {
    /// Oracle for the first, full-horizon solve.
    pub first_stage: OracleMode,
    /// Oracle for the re-planning solves.
    pub later_stages: OracleMode,
    pub newton: NewtonOptions,
}

/// A realised path of the true system under committed coefficients.
#[derive(Debug, Clone)]
pub struct RealisedPath<St> {
    pub states: Vec<St>,
    pub dby: Vec<f64>,
    pub running_cost: f64,
    pub control_cost: f64,
    /// `running_cost + control_cost`.
    pub cost: f64,
    /// Follower mass within the interaction radius of the leader at `T`.
    pub final_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct MarkovControlResult<St> {
    pub committed: Vec<f64>,
    pub stages: Vec<NewtonReport>,
    pub path: RealisedPath<St>,
}

const PLAN_TAG: u64 = 0x504c_414e;

/// Noise seed of interval `k` of a realised path.
pub fn realised_interval_seed(seed: &SeedSpec, k: usize) -> SeedSpec {
    seed.child(k as u64)
}

/// Seed of the re-planning solve at stage `k ≥ 1`.
pub fn replan_seed(seed: &SeedSpec, k: usize) -> SeedSpec {
    seed.child(PLAN_TAG + k as u64)
}

/// Advances the system over interval `k` with coefficient `a`, appending to
/// `path`.
fn advance<S: ControlledSystem>(
    system: &S,
    schedule: &StepSchedule,
    k: usize,
    a: f64,
    realised_seed: &SeedSpec,
    path: &mut RealisedPath<S::State>,
) -> Result<()> {
    let steps = schedule.steps_per_interval[k];
    let start = path.states.last().expect("path starts with the initial state").clone();
    let (rollout, states) = system.trajectory(&start, &vec![a; steps], &realised_interval_seed(realised_seed, k))?;
    path.states.extend(states.into_iter().skip(1));
    path.dby.extend(rollout.dby.iter());
    path.running_cost += rollout.phi();
    path.control_cost += 0.5 * system.lambda() * a * a * steps as f64 * schedule.dt;
    path.cost = path.running_cost + path.control_cost;
    path.final_fraction = system.consensus_fraction(&rollout.final_state);
    Ok(())
}

fn empty_path<S: ControlledSystem>(system: &S, init: &S::State) -> RealisedPath<S::State> {
    RealisedPath {
        states: vec![init.clone()],
        dby: Vec::new(),
        running_cost: 0.0,
        control_cost: 0.0,
        cost: 0.0,
        final_fraction: system.consensus_fraction(init),
    }
}

/// Runs the true system under fixed coefficients with the same per-interval
/// noise as [`markov_solve`] uses for `realised_seed`.
pub fn realised_run<S: ControlledSystem>(
    system: &S,
    schedule: &StepSchedule,
    init: &S::State,
    coeffs: &[f64],
    realised_seed: &SeedSpec,
) -> Result<RealisedPath<S::State>> {
    if coeffs.len() != schedule.intervals() {
        return Err(Error::DimensionMismatch {
            expected: schedule.intervals(),
            got: coeffs.len(),
        });
    }
    let mut path = empty_path(system, init);
    for (k, &a) in coeffs.iter().enumerate() {
        advance(system, schedule, k, a, realised_seed, &mut path)?;
    }
    Ok(path)
}

/// The full-horizon solve that opens [`markov_solve`]. It depends only on
/// `init`, `a0` and `plan_seed`, so replications sharing them can share it.
pub fn plan_first_stage<S: ControlledSystem>(
    system: &S,
    schedule: &StepSchedule,
    init: &S::State,
    a0: &[f64],
    opts: &MarkovOptions,
    plan_seed: &SeedSpec,
) -> Result<NewtonReport> {
    let oracle = build_oracle(&opts.first_stage, system, init.clone(), schedule.clone(), *plan_seed)?;
    newton_solve(oracle.as_ref(), a0, &opts.newton)
}

/// Receding-horizon control: at each stage solve on the remaining horizon
/// from the realised state, commit the first coefficient, advance the true
/// system one interval with fresh noise, and warm-start the next solve with
/// the rest of the solution. The last interval reuses the previous
/// solution's remaining entry without a new solve.
#[allow(clippy::too_many_arguments)]
pub fn markov_solve<S: ControlledSystem>(
    system: &S,
    schedule: &StepSchedule,
    init: &S::State,
    a0: &[f64],
    opts: &MarkovOptions,
    plan_seed: &SeedSpec,
    realised_seed: &SeedSpec,
    first_stage: Option<&NewtonReport>,
) -> Result<MarkovControlResult<S::State>> {
    let m = schedule.intervals();
    if a0.len() != m {
        return Err(Error::DimensionMismatch { expected: m, got: a0.len() });
    }
    let mut path = empty_path(system, init);
    let mut committed = Vec::with_capacity(m);
    let mut stages = Vec::with_capacity(m.saturating_sub(1).max(1));
    let mut warm = a0.to_vec();
    for k in 0..m {
        let solution = if k == 0 {
            let report = match first_stage {
                Some(r) => r.clone(),
                None => plan_first_stage(system, schedule, init, a0, opts, plan_seed)?,
            };
            let a = report.final_a.clone();
            stages.push(report);
            a
        } else if k + 1 < m {
            let state = path.states.last().unwrap().clone();
            let oracle = build_oracle(&opts.later_stages, system, state, schedule.tail(k)?, replan_seed(realised_seed, k))?;
            let report = newton_solve(oracle.as_ref(), &warm, &opts.newton)?;
            let a = report.final_a.clone();
            stages.push(report);
            a
        } else {
            warm.clone()
        };
        debug_assert_eq!(solution.len(), m - k);
        committed.push(solution[0]);
        advance(system, schedule, k, solution[0], realised_seed, &mut path)?;
        warm = solution[1..].to_vec();
    }
    Ok(MarkovControlResult {
        committed,
        stages,
        path,
    })
}

/// Estimator gradient against central differences of the cost under common
/// random numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdCheckReport {
    pub a: Vec<f64>,
    pub steps: Vec<f64>,
    pub estimator: Vec<f64>,
    pub estimator_se: Vec<f64>,
    pub finite_difference: Vec<f64>,
    pub finite_difference_se: Vec<f64>,
    pub relative_error: Vec<f64>,
    /// Components whose estimate exceeds five standard errors.
    pub resolved: Vec<bool>,
    /// Largest relative error over resolved components (0 if none).
    pub max_relative_error: f64,
}

/// Central-difference gradient with step `h_k = h·max(1, |a_k|)` from
/// `fd_paths` paths per side, sharing `seed`.
pub fn fd_gradient<S: ControlledSystem>(
    system: &S,
    init: &S::State,
    schedule: &StepSchedule,
    a: &[f64],
    h: f64,
    fd_paths: usize,
    seed: &SeedSpec,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if !(h > 0.0) {
        return Err(Error::InvalidParameter(format!("finite-difference step must be > 0 (got {h})")));
    }
    let m = a.len();
    let mut mean = Vec::with_capacity(m);
    let mut se = Vec::with_capacity(m);
    let mut steps = Vec::with_capacity(m);
    for k in 0..m {
        let hk = h * a[k].abs().max(1.0);
        let side = |d: f64| -> Result<Vec<f64>> {
            let mut b = a.to_vec();
            b[k] += d;
            Ok(simulate_batch(system, init, schedule, &b, fd_paths, seed)?.path_costs())
        };
        let (plus, minus) = (side(hk)?, side(-hk)?);
        let diffs: Vec<f64> = plus.iter().zip(&minus).map(|(p, q)| (p - q) / (2.0 * hk)).collect();
        let e = EstimateWithError::from_samples(&diffs);
        mean.push(e.mean);
        se.push(e.std_error);
        steps.push(hk);
    }
    Ok((mean, se, steps))
}

/// Compares the score-function gradient (`n_paths` paths) with central
/// differences (`fd_paths` paths per side) under the same seed.
#[allow(clippy::too_many_arguments)]
pub fn fd_gradient_check<S: ControlledSystem>(
    system: &S,
    init: &S::State,
    schedule: &StepSchedule,
    a: &[f64],
    h: f64,
    n_paths: usize,
    fd_paths: usize,
    seed: &SeedSpec,
    options: &EstimatorOptions,
) -> Result<FdCheckReport> {
    let batch = simulate_batch(system, init, schedule, a, n_paths, seed)?;
    let est = crate::estimators::gradient(&batch, a, options)?;
    let (fd, fd_se, steps) = fd_gradient(system, init, schedule, a, h, fd_paths, seed)?;
    let relative_error: Vec<f64> = est
        .mean
        .iter()
        .zip(&fd)
        .map(|(e, f)| if *f != 0.0 { ((e - f) / f).abs() } else { (e - f).abs() })
        .collect();
    let resolved: Vec<bool> = est
        .mean
        .iter()
        .zip(&est.std_error)
        .map(|(g, s)| g.abs() > 5.0 * s)
        .collect();
    let max_relative_error = relative_error
        .iter()
        .zip(&resolved)
        .filter(|(_, r)| **r)
        .fold(0.0f64, |acc, (e, _)| acc.max(*e));
    Ok(FdCheckReport {
        a: a.to_vec(),
        steps,
        estimator: est.mean,
        estimator_se: est.std_error,
        finite_difference: fd,
        finite_difference_se: fd_se,
        relative_error,
        resolved,
        max_relative_error,
    })
}
