//! Monte Carlo estimators of the cost `J(a)`, its gradient and its Hessian in
//! the coefficients of a piecewise-constant leader control, built from
//! likelihood-ratio (Girsanov) score functions of the leader noise.
//!
//! For one path simulated under `u^a` the ingredients are the running-cost
//! integral `φ_T` and the martingales `M^{e_k} = σ⁻¹ Σ_{t_j ∈ I_k} ΔB^Y_j`,
//! with `M^{u^a} = Σ_k a_k M^{e_k}`. The gradient is the sample mean of
//!
//! ```text
//! φ_T · M^{e_k} + λ a_k |I_k|
//! ```
//!
//! The control-cost term can instead be estimated by its score form
//! `λσ²(½(M^u)² + M^u) · M^{e_k}` (see [`EstimatorOptions::control_score`]);
//! it has the same mean but its variance grows like `|a|²/σ²`.
//!
//! and the Hessian (default, [`HessianForm::Compensated`]) the sample mean of
//!
//! ```text
//! φ_T · (M^{e_k} M^{e_l} − δ_kl |I_k|/σ²) + λ δ_kl |I_k|
//! ```
//!
//! which is the second derivative of the Girsanov density. The uncompensated
//! product form is kept as [`HessianForm::Product`].
//!
//! Running cost accrued before `t_k` is independent of the increments that
//! make up `M^{e_k}`, so by default `φ_T` is replaced by the cost-to-go from
//! the start of interval `k` (from `max(k, l)` in the Hessian). Any function
//! of the state at `t_k` may also be subtracted from that factor, because
//! the score terms it multiplies have zero conditional mean; the default
//! baseline is a linear fit on `r(t_k)·(T − t_k)`, cross-fitted between the
//! even and odd paths so that no path's baseline depends on its own noise.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{Basis, PiecewiseConstantControl, StepSchedule};
use crate::dynamics::{running_cost, ParticleSystem, SystemState, TrajectoryBundle};
use crate::error::{Error, Result};
use crate::params::{ModelParams, TimeGrid};
use crate::rng::SeedSpec;
use crate::system::ControlledSystem;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateWithError {
    pub mean: f64,
    pub std_error: f64,
    pub n_paths: usize,
}

impl EstimateWithError {
    /// Sample mean and `sd/√n` (unbiased sample variance).
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let std_error = if n > 1 {
            let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            std_error,
            n_paths: n,
        }
    }

    pub fn exact(value: f64) -> Self {
        Self {
            mean: value,
            std_error: 0.0,
            n_paths: 0,
        }
    }
}

/// Per-path ingredients of the score-function estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct PathFunctionals {
    pub phi: f64,
    /// `phi_from[k]`: running cost accrued from the start of interval `k`.
    pub phi_from: Vec<f64>,
    /// `r(t_k)·(T − t_k)`: the cost-to-go predicted from the running cost at
    /// the start of interval `k`.
    pub predicted_from: Vec<f64>,
    pub m_e: Vec<f64>,
    pub m_u: f64,
}

/// Builds `φ_T`, `M^{e_k}` and `M^{u^a}` from one path's running-cost
/// increments and leader increments.
pub fn path_functionals(
    running: &[f64],
    dby: &[f64],
    schedule: &StepSchedule,
    sigma: f64,
    a: &[f64],
) -> Result<PathFunctionals> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(
            "score functions need an invertible leader diffusion (sigma > 0)".into(),
        ));
    }
    if a.len() != schedule.intervals() {
        return Err(Error::DimensionMismatch {
            expected: schedule.intervals(),
            got: a.len(),
        });
    }
    let steps = schedule.interval_of_step.len();
    for len in [dby.len(), running.len()] {
        if len != steps {
            return Err(Error::DimensionMismatch {
                expected: steps,
                got: len,
            });
        }
    }
    let m = schedule.intervals();
    let mut m_e = vec![0.0; m];
    let mut per_interval = vec![0.0; m];
    for ((&k, &db), &r) in schedule.interval_of_step.iter().zip(dby).zip(running) {
        m_e[k] += db;
        per_interval[k] += r;
    }
    for x in &mut m_e {
        *x /= sigma;
    }
    let mut phi_from = vec![0.0; m];
    let mut predicted_from = vec![0.0; m];
    let mut acc = 0.0;
    let mut first = steps;
    for k in (0..m).rev() {
        acc += per_interval[k];
        phi_from[k] = acc;
        first -= schedule.steps_per_interval[k];
        if first < steps {
            predicted_from[k] = running[first] * (steps - first) as f64;
        }
    }
    let phi = running.iter().sum();
    let m_u = a.iter().zip(&m_e).map(|(a, m)| a * m).sum();
    Ok(PathFunctionals {
        phi,
        phi_from,
        predicted_from,
        m_e,
        m_u,
    })
}

/// [`path_functionals`] for a stored trajectory, with the consensus running
/// cost evaluated at every node but the last.
pub fn bundle_functionals(bundle: &TrajectoryBundle, basis: &Basis, a: &[f64]) -> Result<PathFunctionals> {
    let schedule = basis.schedule(&bundle.grid)?;
    let running: Vec<f64> = bundle.states[..bundle.grid.steps]
        .iter()
        .map(|s| running_cost(s.leader, &s.followers) * bundle.grid.dt)
        .collect();
    path_functionals(&running, &bundle.dby, &schedule, bundle.params.sigma, a)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianForm {
    /// `E[φ (M_k M_l − δ_kl|I_k|/σ²)] + λ δ_kl |I_k|`.
    #[default]
    Compensated,
    /// `E[(φ + λσ²(½(M^u)² + 2M^u + 1)) M_k M_l]`, without the quadratic
    /// variation compensator.
    Product,
}

/// What is subtracted from the cost factor before it multiplies the score
/// terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    None,
    /// Mean of the cost factor over the other half of the batch.
    Mean,
    /// Linear fit on `r(t_k)·(T − t_k)` over the other half of the batch.
    #[default]
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorOptions {
    pub baseline: Baseline,
    /// Use the cost-to-go from the relevant interval instead of `φ_T`.
    pub causal: bool,
    pub hessian: HessianForm,
    /// Estimate the control-cost derivative through its score term
    /// `λσ²(½(M^u)² + M^u)M^{e_k}` instead of using `λ a_k |I_k|` exactly.
    pub control_score: bool,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            baseline: Baseline::Regression,
            causal: true,
            hessian: HessianForm::Compensated,
            control_score: false,
        }
    }
}

impl EstimatorOptions {
    /// Plain `φ_T` weights, no variance reduction.
    pub fn plain() -> Self {
        Self {
            baseline: Baseline::None,
            causal: false,
            hessian: HessianForm::Compensated,
            control_score: true,
        }
    }
}

/// Functionals of a batch of paths simulated under one control.
#[derive(Debug, Clone)]
pub struct PathBatch {
    pub paths: Vec<PathFunctionals>,
    pub a: Vec<f64>,
    pub sigma: f64,
    pub lambda: f64,
    /// Discrete interval lengths.
    pub lengths: Vec<f64>,
    /// `(λ/2) Σ_k a_k² |I_k|`.
    pub control_cost: f64,
}

impl PathBatch {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    /// Realised total cost of every path.
    pub fn path_costs(&self) -> Vec<f64> {
        self.paths.iter().map(|p| p.phi + self.control_cost).collect()
    }

    /// Cost factor multiplying the scores of interval `k` (and later ones).
    fn cost_factor(p: &PathFunctionals, k: usize, opts: &EstimatorOptions) -> f64 {
        if opts.causal {
            p.phi_from[k]
        } else {
            p.phi
        }
    }

    /// Per-path baseline for the cost factor of interval `k`.
    fn baselines(&self, k: usize, opts: &EstimatorOptions) -> Vec<f64> {
        let n = self.paths.len();
        if opts.baseline == Baseline::None || n < 4 {
            return vec![0.0; n];
        }
        let feature = |p: &PathFunctionals| match opts.baseline {
            Baseline::Regression => p.predicted_from[k],
            _ => 0.0,
        };
        // fit on one parity, apply to the other
        let fits: Vec<(f64, f64)> = (0..2)
            .map(|fold| {
                let pts: Vec<(f64, f64)> = self
                    .paths
                    .iter()
                    .skip(fold)
                    .step_by(2)
                    .map(|p| (feature(p), Self::cost_factor(p, k, opts)))
                    .collect();
                let len = pts.len() as f64;
                let (mx, my) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x / len, b + y / len));
                let (sxy, sxx) = pts
                    .iter()
                    .fold((0.0, 0.0), |(a, b), (x, y)| (a + (x - mx) * (y - my), b + (x - mx).powi(2)));
                let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
                (my - slope * mx, slope)
            })
            .collect();
        self.paths
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let (intercept, slope) = fits[1 - i % 2];
                intercept + slope * feature(p)
            })
            .collect()
    }
}

/// Simulates `n_paths` paths of `system` from `init` under coefficients `a`.
/// Path `p` uses `seed.path(p)`, so two calls with the same seed share their
/// random numbers.
pub fn simulate_batch<S: ControlledSystem>(
    system: &S,
    init: &S::State,
    schedule: &StepSchedule,
    a: &[f64],
    n_paths: usize,
    seed: &SeedSpec,
) -> Result<PathBatch> {
    let controls = schedule.controls(a)?;
    let sigma = system.sigma();
    let paths = (0..n_paths as u64)
        .into_par_iter()
        .map(|p| {
            let r = system.rollout(init, &controls, &seed.path(p))?;
            path_functionals(&r.running, &r.dby, schedule, sigma, a)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PathBatch {
        paths,
        a: a.to_vec(),
        sigma,
        lambda: system.lambda(),
        lengths: schedule.interval_lengths(),
        control_cost: schedule.control_cost(a, system.lambda()),
    })
}

/// Sample mean of `φ_T + (λ/2)Σ|u|²dt` with its standard error.
pub fn cost_estimate(batch: &PathBatch) -> Result<EstimateWithError> {
    if batch.len() < 2 {
        return Err(Error::InvalidParameter("need at least two paths".into()));
    }
    Ok(EstimateWithError::from_samples(&batch.path_costs()))
}

/// Direct Monte Carlo estimate of `J(u)` for the finite-N system.
pub fn cost_direct(
    params: &ModelParams,
    grid: &TimeGrid,
    control: &PiecewiseConstantControl,
    init: &SystemState,
    n_paths: usize,
    seed: &SeedSpec,
) -> Result<EstimateWithError> {
    if n_paths < 2 {
        return Err(Error::InvalidParameter("need at least two paths".into()));
    }
    let system = ParticleSystem::new(*params, grid.dt)?;
    let schedule = control.basis.schedule(grid)?;
    let controls = schedule.controls(&control.coeffs)?;
    let control_cost = schedule.control_cost(&control.coeffs, params.lambda);
    let costs = (0..n_paths as u64)
        .into_par_iter()
        .map(|p| {
            system
                .rollout(init, &controls, &seed.path(p))
                .map(|r| r.phi() + control_cost)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EstimateWithError::from_samples(&costs))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HessianEstimate {
    pub mean: DMatrix<f64>,
    pub std_error: DMatrix<f64>,
}

fn check_basis(batch: &PathBatch, a: &[f64]) -> Result<usize> {
    let m = batch.lengths.len();
    if a.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: a.len(),
        });
    }
    if batch.len() < 2 {
        return Err(Error::InvalidParameter("need at least two paths".into()));
    }
    Ok(m)
}

/// Score-function gradient `(φ_T − b) M^{e_k}` plus the control-cost derivative.
pub fn gradient(batch: &PathBatch, a: &[f64], opts: &EstimatorOptions) -> Result<GradientEstimate> {
    let m = check_basis(batch, a)?;
    let ls2 = batch.lambda * batch.sigma * batch.sigma;
    let mut mean = Vec::with_capacity(m);
    let mut std_error = Vec::with_capacity(m);
    let mut samples = vec![0.0; batch.len()];
    #[allow(clippy::needless_range_loop)]
    for k in 0..m {
        let c = batch.baselines(k, opts);
        for ((s, p), c) in samples.iter_mut().zip(&batch.paths).zip(&c) {
            let phi = PathBatch::cost_factor(p, k, opts);
            let control = if opts.control_score {
                ls2 * (0.5 * p.m_u * p.m_u + p.m_u)
            } else {
                0.0
            };
            *s = (phi - c + control) * p.m_e[k];
        }
        let mut e = EstimateWithError::from_samples(&samples);
        if !opts.control_score {
            e.mean += batch.lambda * a[k] * batch.lengths[k];
        }
        mean.push(e.mean);
        std_error.push(e.std_error);
    }
    Ok(GradientEstimate { mean, std_error })
}

/// Score-function Hessian; symmetric by construction.
pub fn hessian(batch: &PathBatch, a: &[f64], opts: &EstimatorOptions) -> Result<HessianEstimate> {
    let m = check_basis(batch, a)?;
    let sigma2 = batch.sigma * batch.sigma;
    let ls2 = batch.lambda * sigma2;
    let mut mean = DMatrix::zeros(m, m);
    let mut std_error = DMatrix::zeros(m, m);
    let mut samples = vec![0.0; batch.len()];
    let baselines: Vec<Vec<f64>> = (0..m)
        .map(|l| match opts.hessian {
            HessianForm::Compensated => batch.baselines(l, opts),
            HessianForm::Product => vec![0.0; batch.len()],
        })
        .collect();
    for k in 0..m {
        for l in k..m {
            let delta = if k == l { batch.lengths[k] / sigma2 } else { 0.0 };
            // l >= k, so l is the later interval
            for ((s, p), c) in samples.iter_mut().zip(&batch.paths).zip(&baselines[l]) {
                let mm = p.m_e[k] * p.m_e[l];
                *s = match opts.hessian {
                    HessianForm::Compensated => (PathBatch::cost_factor(p, l, opts) - c) * (mm - delta),
                    HessianForm::Product => {
                        (p.phi + ls2 * (0.5 * p.m_u * p.m_u + 2.0 * p.m_u + 1.0)) * mm
                    }
                };
            }
            let mut e = EstimateWithError::from_samples(&samples);
            if opts.hessian == HessianForm::Compensated && k == l {
                e.mean += batch.lambda * batch.lengths[k];
            }
            mean[(k, l)] = e.mean;
            mean[(l, k)] = e.mean;
            std_error[(k, l)] = e.std_error;
            std_error[(l, k)] = e.std_error;
        }
    }
    Ok(HessianEstimate { mean, std_error })
}

/// Girsanov-reweighted cost estimate from paths simulated with zero control.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReweightedCost {
    pub estimate: EstimateWithError,
    /// Kish effective sample size of the likelihood ratios.
    pub effective_sample_size: f64,
    /// Effective sample size below 10% of the path count.
    pub degenerate: bool,
}

/// Estimates `J(u^a)` from a batch simulated under `u ≡ 0` by weighting each
/// path with `Z = exp(Σ_k a_k M^{e_k} − ½ Σ_k a_k²|I_k|/σ²)`.
pub fn cost_reweighted(base: &PathBatch, a: &[f64]) -> Result<ReweightedCost> {
    let m = check_basis(base, a)?;
    if base.a.iter().any(|&x| x != 0.0) {
        return Err(Error::InvalidParameter(
            "reweighting needs base paths simulated with zero control".into(),
        ));
    }
    let sigma2 = base.sigma * base.sigma;
    let quad: f64 = (0..m).map(|k| a[k] * a[k] * base.lengths[k]).sum::<f64>() / sigma2;
    let control_cost = 0.5 * base.lambda * (0..m).map(|k| a[k] * a[k] * base.lengths[k]).sum::<f64>();
    let log_w: Vec<f64> = base
        .paths
        .iter()
        .map(|p| a.iter().zip(&p.m_e).map(|(a, m)| a * m).sum::<f64>() - 0.5 * quad)
        .collect();
    let weights: Vec<f64> = log_w.iter().map(|l| l.exp()).collect();
    let samples: Vec<f64> = weights
        .iter()
        .zip(&base.paths)
        .map(|(w, p)| w * (p.phi + control_cost))
        .collect();
    let estimate = EstimateWithError::from_samples(&samples);
    // ESS from log-weights shifted by their max to avoid underflow
    let max_l = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (s1, s2) = log_w.iter().fold((0.0, 0.0), |(s1, s2), l| {
        let w = (l - max_l).exp();
        (s1 + w, s2 + w * w)
    });
    let effective_sample_size = s1 * s1 / s2;
    let degenerate = effective_sample_size < 0.1 * base.len() as f64;
    if degenerate {
        log::warn!(
            "likelihood-ratio weights degenerate: ESS {:.1} of {} paths",
            effective_sample_size,
            base.len()
        );
    }
    Ok(ReweightedCost {
        estimate,
        effective_sample_size,
        degenerate,
    })
}

/// Everything an optimiser needs at one coefficient vector.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub a: Vec<f64>,
    pub cost: EstimateWithError,
    /// Per-path realised costs, for paired comparisons under common random
    /// numbers. Empty for exact oracles.
    pub path_costs: Vec<f64>,
    pub grad: GradientEstimate,
    pub hess: HessianEstimate,
}

impl Evaluation {
    /// Standard error of `self.cost − other.cost`, paired path by path when
    /// both come from the same random numbers.
    pub fn difference_std_error(&self, other: &Evaluation) -> f64 {
        if !self.path_costs.is_empty() && self.path_costs.len() == other.path_costs.len() {
            let d: Vec<f64> = self
                .path_costs
                .iter()
                .zip(&other.path_costs)
                .map(|(x, y)| x - y)
                .collect();
            EstimateWithError::from_samples(&d).std_error
        } else {
            self.cost.std_error.hypot(other.cost.std_error)
        }
    }
}

/// Gradient/Hessian dump: `{a, grad, grad_se, hess, hess_se, n_paths, seed}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeDump {
    pub a: Vec<f64>,
    pub grad: Vec<f64>,
    pub grad_se: Vec<f64>,
    pub hess: Vec<Vec<f64>>,
    pub hess_se: Vec<Vec<f64>>,
    pub n_paths: usize,
    pub seed: u64,
}

impl DerivativeDump {
    pub fn new(eval: &Evaluation, seed: u64) -> Self {
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows()).map(|i| m.row(i).iter().cloned().collect()).collect()
        };
        Self {
            a: eval.a.clone(),
            grad: eval.grad.mean.clone(),
            grad_se: eval.grad.std_error.clone(),
            hess: rows(&eval.hess.mean),
            hess_se: rows(&eval.hess.std_error),
            n_paths: eval.cost.n_paths,
            seed,
        }
    }
}

/// Evaluates cost, gradient and Hessian from one batch.
pub fn evaluate_batch(batch: &PathBatch, opts: &EstimatorOptions) -> Result<Evaluation> {
    Ok(Evaluation {
        a: batch.a.clone(),
        cost: cost_estimate(batch)?,
        path_costs: batch.path_costs(),
        grad: gradient(batch, &batch.a, opts)?,
        hess: hessian(batch, &batch.a, opts)?,
    })
}
