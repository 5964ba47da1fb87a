//! The subcommands. Each validates its configuration before touching the
//! output directory, so a configuration error leaves no files behind.

use log::{info, warn};
use mfc_core::chaos::{convergence_study, fit_slope, CouplingSetup};
use mfc_core::control::{PiecewiseConstantControl, StepSchedule};
use mfc_core::dynamics::{simulate_with, ParticleSystem, SystemState};
use mfc_core::estimators::{DerivativeDump, EstimateWithError};
use mfc_core::meanfield::{simulate_mf, GridDensity, MeanFieldState, MeanFieldSystem};
use mfc_core::optimize::{
    fd_gradient_check, markov_solve, newton_solve, plan_first_stage, realised_run, MarkovOptions, MonteCarloOracle,
    OracleMode, RealisedPath,
};
use mfc_core::params::TimeGrid;
use mfc_core::rng::SeedSpec;
use mfc_core::system::ControlledSystem;
use mfc_core::torus::{sample_von_mises_mixture, wrap_f64, VonMisesMixture};
use serde::Serialize;
use serde_json::json;

use crate::artefacts::{
    density_header, mean_field_rows, noise_header, trajectory_header, write_density, write_iterations, write_noise,
    write_trajectory, Artefacts,
};
use crate::config::{canonical_toml, validate_chaos, validate_config, validate_meanfield, ExperimentConfig};
use crate::error::CliError;

const SIMULATE_TAG: u64 = 1;
const PLAN_TAG: u64 = 2;
const REALISED_TAG: u64 = 3;
const CHAOS_TAG: u64 = 4;
const CHECK_TAG: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    Simulate,
    Optimize,
    Markov,
    MeanField,
    MfOptimize,
    Chaos,
    CheckGradient,
}

pub fn run(cmd: Subcommand, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let mut violations = validate_config(cfg);
    match cmd {
        Subcommand::MeanField | Subcommand::MfOptimize => violations.extend(validate_meanfield(cfg)),
        Subcommand::Chaos => violations.extend(validate_chaos(cfg)),
        _ => {}
    }
    if !violations.is_empty() {
        return Err(CliError::Config(violations.join("; ")));
    }
    let ctx = Context::new(cfg)?;
    let mut art = Artefacts::create(&cfg.output_dir)?;
    art.text("config.toml", &canonical_toml(cfg))?;
    match cmd {
        Subcommand::Simulate => simulate(&ctx, &mut art)?,
        Subcommand::Optimize => optimize(&ctx, &mut art)?,
        Subcommand::Markov => markov(&ctx, &mut art)?,
        Subcommand::MeanField => meanfield(&ctx, &mut art)?,
        Subcommand::MfOptimize => mf_optimize(&ctx, &mut art)?,
        Subcommand::Chaos => chaos(&ctx, &mut art)?,
        Subcommand::CheckGradient => check_gradient(&ctx, &mut art)?,
    }
    let dir = art.finish(cfg)?;
    info!("artefacts written to {}", dir.display());
    Ok(())
}

/// Everything derived from a validated configuration.
struct Context<'a> {
    cfg: &'a ExperimentConfig,
    grid: TimeGrid,
    schedule: StepSchedule,
    control: PiecewiseConstantControl,
    seed: SeedSpec,
}

impl<'a> Context<'a> {
    fn new(cfg: &'a ExperimentConfig) -> Result<Self, CliError> {
        let grid = cfg.time_grid()?;
        let basis = cfg.basis()?;
        let schedule = basis.schedule(&grid)?;
        let control = PiecewiseConstantControl::new(basis, cfg.control.initial.clone())?;
        Ok(Self {
            cfg,
            grid,
            schedule,
            control,
            seed: SeedSpec::new(cfg.seed),
        })
    }

    fn particle_system(&self) -> Result<ParticleSystem, CliError> {
        Ok(ParticleSystem::new(self.cfg.model, self.grid.dt)?
            .with_kernel(self.cfg.dynamics.kernel)
            .with_running_cost(self.cfg.dynamics.running_cost))
    }

    fn particle_init(&self) -> Result<SystemState, CliError> {
        let followers = match &self.cfg.initial.followers {
            Some(x) => x.iter().map(|x| wrap_f64(*x)).collect(),
            None => sample_von_mises_mixture(&self.seed, self.cfg.model.followers)
                .iter()
                .map(|p| p.get())
                .collect(),
        };
        Ok(SystemState::new(followers, wrap_f64(self.cfg.initial.leader))?)
    }

    fn initial_density(&self, cells: usize) -> Result<GridDensity, CliError> {
        let mix = VonMisesMixture::two_clusters();
        Ok(GridDensity::from_fn(cells, |x| mix.density(x))?)
    }

    fn mean_field_system(&self) -> Result<MeanFieldSystem, CliError> {
        Ok(MeanFieldSystem::new(self.cfg.model, self.grid.dt, self.cfg.meanfield.cells)?
            .with_running_cost(self.cfg.dynamics.running_cost))
    }

    fn mean_field_init(&self) -> Result<MeanFieldState, CliError> {
        Ok(MeanFieldState {
            density: self.initial_density(self.cfg.meanfield.cells)?,
            leader: wrap_f64(self.cfg.initial.leader),
        })
    }

    fn markov_options(&self) -> MarkovOptions {
        let mc = &self.cfg.monte_carlo;
        MarkovOptions {
            first_stage: OracleMode::MonteCarlo {
                n_paths: mc.paths,
                estimator: mc.estimator,
            },
            later_stages: OracleMode::MonteCarlo {
                n_paths: mc.replan_paths,
                estimator: mc.estimator,
            },
            newton: self.cfg.newton,
        }
    }
}

fn simulate(ctx: &Context, art: &mut Artefacts) -> Result<(), CliError> {
    let system = ctx.particle_system()?;
    let init = ctx.particle_init()?;
    write_particle_paths(ctx, art, &system, &init, &ctx.control)
}

fn write_particle_paths(
    ctx: &Context,
    art: &mut Artefacts,
    system: &ParticleSystem,
    init: &SystemState,
    control: &PiecewiseConstantControl,
) -> Result<(), CliError> {
    let mut traj = art.csv("trajectories.csv", &trajectory_header(ctx.cfg.model.followers))?;
    let mut noise = art.csv("noise.csv", &noise_header())?;
    let seed = ctx.seed.child(SIMULATE_TAG);
    for p in 0..ctx.cfg.monte_carlo.trajectories {
        let b = simulate_with(system, &ctx.grid, control, init, &seed.path(p as u64))?;
        write_trajectory(&mut traj, p, &ctx.grid, &b.states)?;
        write_noise(&mut noise, p, &b.dby)?;
    }
    traj.flush()?;
    noise.flush()?;
    Ok(())
}

fn optimize(ctx: &Context, art: &mut Artefacts) -> Result<(), CliError> {
    let system = ctx.particle_system()?;
    let init = ctx.particle_init()?;
    let plan_seed = ctx.seed.child(PLAN_TAG);
    let oracle = MonteCarloOracle {
        system: &system,
        init: init.clone(),
        schedule: ctx.schedule.clone(),
        n_paths: ctx.cfg.monte_carlo.paths,
        seed: plan_seed,
        options: ctx.cfg.monte_carlo.estimator,
    };
    let report = newton_solve(&oracle, &ctx.cfg.control.initial, &ctx.cfg.newton)?;
    if !report.converged {
        warn!("Newton iteration stopped after {} iterations without converging", report.iterates.len());
    }
    write_iterations(art, "iterations.csv", &report.iterates)?;
    art.json("derivatives.json", &DerivativeDump::new(&report.final_evaluation, ctx.cfg.seed))?;
    let first = report.iterates.first().map(|it| (it.cost, it.cost_se));
    art.json(
        "summary.json",
        &json!({
            "converged": report.converged,
            "iterations": report.iterates.len(),
            "evaluations": report.evaluations,
            "tol": report.tol,
            "initial_a": ctx.cfg.control.initial,
            "initial_J": first.map(|f| f.0),
            "initial_J_se": first.map(|f| f.1),
            "final_a": report.final_a,
            "final_J": report.final_evaluation.cost.mean,
            "final_J_se": report.final_evaluation.cost.std_error,
        }),
    )?;
    let optimal = PiecewiseConstantControl::new(ctx.control.basis.clone(), report.final_a.clone())?;
    write_particle_paths(ctx, art, &system, &init, &optimal)
}

#[derive(Serialize)]
struct PolicyStats {
    mean_cost: f64,
    se_cost: f64,
    mean_fraction: f64,
    se_fraction: f64,
}

fn stats<St>(paths: &[RealisedPath<St>]) -> PolicyStats {
    let cost = EstimateWithError::from_samples(&paths.iter().map(|p| p.cost).collect::<Vec<_>>());
    let fraction = EstimateWithError::from_samples(&paths.iter().map(|p| p.final_fraction).collect::<Vec<_>>());
    PolicyStats {
        mean_cost: cost.mean,
        se_cost: cost.std_error,
        mean_fraction: fraction.mean,
        se_fraction: fraction.std_error,
    }
}

/// Per-replication realisations of the receding-horizon, open-loop and
/// zero controls, all on the same realised noise.
struct MarkovRun<St> {
    committed: Vec<Vec<f64>>,
    markov: Vec<RealisedPath<St>>,
    open_loop: Vec<RealisedPath<St>>,
    zero: Vec<RealisedPath<St>>,
}

fn run_markov<S: ControlledSystem>(
    ctx: &Context,
    art: &mut Artefacts,
    system: &S,
    init: &S::State,
) -> Result<MarkovRun<S::State>, CliError> {
    let opts = ctx.markov_options();
    let plan_seed = ctx.seed.child(PLAN_TAG);
    let a0 = &ctx.cfg.control.initial;
    let first = plan_first_stage(system, &ctx.schedule, init, a0, &opts, &plan_seed)?;
    if !first.converged {
        warn!("first-stage solve stopped without converging");
    }
    write_iterations(art, "iterations.csv", &first.iterates)?;
    let m = ctx.schedule.intervals();
    let mut run = MarkovRun {
        committed: Vec::new(),
        markov: Vec::new(),
        open_loop: Vec::new(),
        zero: Vec::new(),
    };
    for rep in 0..ctx.cfg.monte_carlo.replications {
        let realised = ctx.seed.child(REALISED_TAG).path(rep as u64);
        let res = markov_solve(system, &ctx.schedule, init, a0, &opts, &plan_seed, &realised, Some(&first))?;
        info!(
            "replication {rep}: committed {:?}, final fraction {:.3}",
            res.committed, res.path.final_fraction
        );
        run.open_loop
            .push(realised_run(system, &ctx.schedule, init, &first.final_a, &realised)?);
        run.zero
            .push(realised_run(system, &ctx.schedule, init, &vec![0.0; m], &realised)?);
        run.committed.push(res.committed);
        run.markov.push(res.path);
    }

    let mut header = vec!["rep".to_string()];
    header.extend((1..=m).map(|k| format!("a_{k}")));
    header.extend(
        ["J_markov", "J_open_loop", "J_zero", "fraction_markov", "fraction_open_loop", "fraction_zero"]
            .iter()
            .map(|s| s.to_string()),
    );
    let mut w = art.csv("markov.csv", &header)?;
    for rep in 0..run.markov.len() {
        let mut row = vec![rep.to_string()];
        row.extend(run.committed[rep].iter().map(|a| format!("{a}")));
        for x in [
            run.markov[rep].cost,
            run.open_loop[rep].cost,
            run.zero[rep].cost,
            run.markov[rep].final_fraction,
            run.open_loop[rep].final_fraction,
            run.zero[rep].final_fraction,
        ] {
            row.push(format!("{x}"));
        }
        w.write_record(&row)?;
    }
    w.flush()?;

    let gain: Vec<f64> = run
        .markov
        .iter()
        .zip(&run.zero)
        .map(|(a, b)| a.final_fraction - b.final_fraction)
        .collect();
    let gain = EstimateWithError::from_samples(&gain);
    art.json(
        "summary.json",
        &json!({
            "replications": run.markov.len(),
            "first_stage": {
                "converged": first.converged,
                "iterations": first.iterates.len(),
                "final_a": first.final_a,
                "J": first.final_evaluation.cost.mean,
                "J_se": first.final_evaluation.cost.std_error,
            },
            "markov": stats(&run.markov),
            "open_loop": stats(&run.open_loop),
            "zero": stats(&run.zero),
            "fraction_gain_over_zero": { "mean": gain.mean, "se": gain.std_error },
            "paths": ["markov", "open_loop", "zero"],
        }),
    )?;
    Ok(run)
}

fn markov(ctx: &Context, art: &mut Artefacts) -> Result<(), CliError> {
    let system = ctx.particle_system()?;
    let init = ctx.particle_init()?;
    let run = run_markov(ctx, art, &system, &init)?;
    let mut traj = art.csv("trajectories.csv", &trajectory_header(ctx.cfg.model.followers))?;
    let mut noise = art.csv("noise.csv", &noise_header())?;
    for (id, path) in [&run.markov[0], &run.open_loop[0], &run.zero[0]].into_iter().enumerate() {
        write_trajectory(&mut traj, id, &ctx.grid, &path.states)?;
        write_noise(&mut noise, id, &path.dby)?;
    }
    traj.flush()?;
    noise.flush()?;
    Ok(())
}

fn meanfield(ctx: &Context, art: &mut Artefacts) -> Result<(), CliError> {
    let system = ctx.mean_field_system()?;
    let init = ctx.mean_field_init()?;
    let mut w = art.csv("density.csv", &density_header(ctx.cfg.meanfield.cells))?;
    let mut noise = art.csv("noise.csv", &noise_header())?;
    let seed = ctx.seed.child(SIMULATE_TAG);
    for p in 0..ctx.cfg.monte_carlo.trajectories {
        let tr = simulate_mf(&system, &ctx.grid, &ctx.control, &init.density, init.leader, &seed.path(p as u64))?;
        let rows = tr.leader.iter().zip(&tr.densities).map(|(y, g)| (*y, g.values().to_vec()));
        write_density(&mut w, p, &ctx.grid, rows)?;
        write_noise(&mut noise, p, &tr.dby)?;
    }
    w.flush()?;
    noise.flush()?;
    Ok(())
}

fn mf_optimize(ctx: &Context, art: &mut Artefacts) -> Result<(), CliError> {
    let system = ctx.mean_field_system()?;
    let init = ctx.mean_field_init()?;
    let run = run_markov(ctx, art, &system, &init)?;
    let mut w = art.csv("density.csv", &density_header(ctx.cfg.meanfield.cells))?;
    let mut noise = art.csv("noise.csv", &noise_header())?;
    for (id, path) in [&run.markov[0], &run.open_loop[0], &run.zero[0]].into_iter().enumerate() {
        write_density(&mut w, id, &ctx.grid, mean_field_rows(&path.states))?;
        write_noise(&mut noise, id, &path.dby)?;
    }
    w.flush()?;
    noise.flush()?;
    Ok(())
}

fn chaos(ctx: &Context, art: &mut Artefacts) -> Result<(), CliError> {
    let ch = &ctx.cfg.chaos;
    let mut setup = CouplingSetup::new(ctx.initial_density(ch.cells)?, ctx.cfg.initial.leader);
    setup.min_quantiles = ch.min_quantiles;
    let seed = ctx.seed.child(CHAOS_TAG);
    let table = convergence_study(&ctx.cfg.model, &ctx.grid, &ctx.control, &setup, &ch.followers, ch.replications, &seed)
        .map_err(|e| CliError::Run(e.to_string()))?;
    let mut w = art.csv(
        "study.csv",
        &["N", "rep", "sup_w2_sq", "sup_dy_sq"].map(String::from),
    )?;
    for r in &table.records {
        w.write_record([
            r.followers.to_string(),
            r.rep.to_string(),
            format!("{}", r.sup_w2_sq),
            format!("{}", r.sup_dy_sq),
        ])?;
    }
    w.flush()?;
    let fit = match fit_slope(&table, ch.bootstrap, ch.level, ctx.cfg.seed) {
        Ok(f) => Some(f),
        Err(e) => {
            warn!("slope fit failed: {e}");
            None
        }
    };
    art.json(
        "summary.json",
        &json!({
            "rows": table.rows,
            "slope": fit,
            "cells": ch.cells,
            "dt": ctx.grid.dt,
        }),
    )?;
    if fit.is_none() {
        return Err(CliError::Run("could not fit the convergence slope".into()));
    }
    Ok(())
}

fn check_gradient(ctx: &Context, art: &mut Artefacts) -> Result<(), CliError> {
    let system = ctx.particle_system()?;
    let init = ctx.particle_init()?;
    let a = ctx.cfg.check.point.clone().unwrap_or_else(|| ctx.cfg.control.initial.clone());
    let report = fd_gradient_check(
        &system,
        &init,
        &ctx.schedule,
        &a,
        ctx.cfg.check.step,
        ctx.cfg.monte_carlo.paths,
        ctx.cfg.check.fd_paths,
        &ctx.seed.child(CHECK_TAG),
        &ctx.cfg.monte_carlo.estimator,
    )?;
    art.json("gradient_check.json", &report)?;
    let tol = ctx.cfg.check.tolerance;
    if !report.resolved.iter().any(|r| *r) {
        warn!("no gradient component is resolved above five standard errors; the check is vacuous");
    }
    info!("max relative error over resolved components: {:.3e}", report.max_relative_error);
    if report.max_relative_error > tol {
        return Err(CliError::Run(format!(
            "max relative error {:.3e} exceeds the tolerance {tol:e}",
            report.max_relative_error
        )));
    }
    Ok(())
}
