//! Acceptance suite. Prints one PASS/FAIL line per criterion and a summary.
//!
//! Run a subset with `cargo test --test acceptance -- 3 7`. The process
//! exits 0 unless `MFC_ACCEPTANCE_STRICT=1`, in which case any FAIL makes it
//! exit 1.

use std::f64::consts::TAU;
use std::time::Instant;

use mfc_core::chaos::{convergence_study, fit_slope, CouplingSetup};
use mfc_core::control::{Basis, PiecewiseConstantControl, StepSchedule};
use mfc_core::dynamics::{ParticleSystem, RunningCost, SystemState};
use mfc_core::estimators::{
    cost_direct, cost_reweighted, gradient, hessian, simulate_batch, EstimateWithError, EstimatorOptions,
};
use mfc_core::meanfield::{cfl_max_dt, FokkerPlanck, GridDensity, MeanFieldState, MeanFieldSystem};
use mfc_core::optimize::{
    fd_gradient_check, markov_solve, newton_solve, plan_first_stage, realised_run, MarkovOptions, MonteCarloOracle,
    NewtonOptions, NewtonReport, OracleMode,
};
use mfc_core::params::{ModelParams, TimeGrid};
use mfc_core::rng::{SeedSpec, DEFAULT_SEED};
use mfc_core::system::ControlledSystem;
use mfc_core::torus::{sample_von_mises_mixture, VonMisesMixture};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Step of the particle runs.
const DT: f64 = 0.01;
const PATHS: usize = 10_000;
const REPLAN_PATHS: usize = 2_000;
const REPLICATIONS: usize = 20;
/// One-sided 95% normal quantile.
const Z95: f64 = 1.645;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn seed(criterion: u64) -> SeedSpec {
    SeedSpec::new(DEFAULT_SEED).child(criterion)
}

fn paper_params(sigma: f64) -> ModelParams {
    ModelParams {
        sigma,
        ..ModelParams::hegselmann_krause()
    }
}

fn paper_init(n: usize) -> SystemState {
    let x = sample_von_mises_mixture(&SeedSpec::new(DEFAULT_SEED), n)
        .iter()
        .map(|p| p.get())
        .collect();
    SystemState::new(x, 0.8).unwrap()
}

fn paper_schedule(dt: f64) -> StepSchedule {
    let grid = TimeGrid::with_dt(1.0, dt).unwrap();
    Basis::uniform(1.0, 5).unwrap().schedule(&grid).unwrap()
}

fn paper_g0(cells: usize) -> GridDensity {
    let mix = VonMisesMixture::two_clusters();
    GridDensity::from_fn(cells, |x| mix.density(x)).unwrap()
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn criterion_1() -> Outcome {
    let system = ParticleSystem::new(paper_params(0.05), DT).unwrap();
    let sched = paper_schedule(DT);
    let batch = simulate_batch(&system, &paper_init(99), &sched, &[0.0; 5], PATHS, &seed(1)).unwrap();
    let sigma2 = 0.05f64.powi(2);
    let mut pass = true;
    let mut worst_z: f64 = 0.0;
    let mut worst_rel: f64 = 0.0;
    for (k, len) in sched.interval_lengths().iter().enumerate() {
        let m: Vec<f64> = batch.paths.iter().map(|p| p.m_e[k]).collect();
        let first = EstimateWithError::from_samples(&m);
        let sq: Vec<f64> = m.iter().map(|x| x * x).collect();
        let second = EstimateWithError::from_samples(&sq).mean;
        let z = first.mean.abs() / first.std_error;
        let rel = (second / (len / sigma2) - 1.0).abs();
        worst_z = worst_z.max(z);
        worst_rel = worst_rel.max(rel);
        pass &= z <= 3.0 && rel <= 0.05;
    }
    Outcome::new(
        pass,
        format!("max |E M|/SE = {worst_z:.2} (<= 3), max rel. error of E M^2 = {worst_rel:.4} (<= 0.05)"),
    )
}

fn criterion_2() -> Outcome {
    let system = ParticleSystem::new(paper_params(0.05), DT)
        .unwrap()
        .with_running_cost(RunningCost::Zero);
    let sched = paper_schedule(DT);
    let init = paper_init(99);
    let lambda = 0.01;
    let lengths = sched.interval_lengths();
    let score = EstimatorOptions {
        control_score: true,
        ..EstimatorOptions::default()
    };
    let mut pass = true;
    let mut notes = Vec::new();

    let a = [0.5, -1.0, 0.3, 2.0, -0.7];
    let batch = simulate_batch(&system, &init, &sched, &a, PATHS, &seed(2).child(1)).unwrap();
    for (name, opts) in [("exact control term", EstimatorOptions::default()), ("score control term", score)] {
        let g = gradient(&batch, &a, &opts).unwrap();
        let z = (0..5)
            .map(|k| (g.mean[k] - lambda * a[k] * lengths[k]).abs() / g.std_error[k].max(1e-300))
            .fold(0.0, f64::max);
        let ok = (0..5).all(|k| (g.mean[k] - lambda * a[k] * lengths[k]).abs() <= 3.0 * g.std_error[k] + 1e-15);
        pass &= ok;
        notes.push(format!("gradient ({name}) max z {z:.2}"));
    }

    let zero = [0.0; 5];
    let batch = simulate_batch(&system, &init, &sched, &zero, PATHS, &seed(2).child(2)).unwrap();
    let h = hessian(&batch, &zero, &EstimatorOptions::default()).unwrap();
    let mut ok = true;
    #[allow(clippy::needless_range_loop)]
    for k in 0..5 {
        for l in 0..5 {
            let exact = if k == l { lambda * lengths[k] } else { 0.0 };
            ok &= (h.mean[(k, l)] - exact).abs() <= 3.0 * h.std_error[(k, l)] + 1e-15;
        }
    }
    pass &= ok;
    notes.push(format!("Hessian at 0 within 3 SE: {ok}"));

    let oracle = MonteCarloOracle {
        system: &system,
        init: init.clone(),
        schedule: sched.clone(),
        n_paths: PATHS,
        seed: seed(2).child(3),
        options: score,
    };
    let report = newton_solve(&oracle, &[1.0; 5], &NewtonOptions::default()).unwrap();
    let reached = report.iterates.windows(2).take(3).position(|w| {
        let floor = (0..5)
            .map(|k| 3.0 * w[0].grad_se[k] / w[0].hess_diag[k])
            .fold(0.0, f64::max);
        w[1].a.iter().fold(0.0f64, |m, x| m.max(x.abs())) < floor
    });
    pass &= reached.is_some();
    notes.push(match reached {
        Some(i) => format!("Newton below the 3-SE floor after {} iteration(s)", i + 1),
        None => "Newton did not reach the 3-SE floor within 3 iterations".into(),
    });
    Outcome::new(pass, notes.join("; "))
}

fn criterion_3() -> Outcome {
    let system = ParticleSystem::new(paper_params(0.05), DT).unwrap();
    let sched = paper_schedule(DT);
    let init = paper_init(99);
    let mut rng = ChaCha8Rng::seed_from_u64(DEFAULT_SEED);
    let random: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut pass = true;
    let mut notes = Vec::new();
    for (i, a) in [vec![0.0; 5], random].into_iter().enumerate() {
        let r = fd_gradient_check(
            &system,
            &init,
            &sched,
            &a,
            1e-2,
            100_000,
            20_000,
            &seed(3).child(i as u64),
            &EstimatorOptions::default(),
        )
        .unwrap();
        let resolved = r.resolved.iter().filter(|x| **x).count();
        let ok = resolved > 0 && r.max_relative_error < 0.05;
        pass &= ok;
        notes.push(format!(
            "a = {}: max rel. error {:.4} over {resolved} resolved components",
            fmt_vec(&a),
            r.max_relative_error
        ));
    }
    Outcome::new(pass, notes.join("; "))
}

fn criterion_4() -> Outcome {
    let params = paper_params(0.05);
    let grid = TimeGrid::with_dt(1.0, DT).unwrap();
    let basis = Basis::uniform(1.0, 5).unwrap();
    let system = ParticleSystem::new(params, DT).unwrap();
    let sched = basis.schedule(&grid).unwrap();
    let init = paper_init(99);
    let base = simulate_batch(&system, &init, &sched, &[0.0; 5], PATHS, &seed(4).child(0)).unwrap();
    let shape = [1.0, -0.6, 0.8, -0.3, 0.5];
    let mut pass = true;
    let mut notes = Vec::new();
    for (i, scale) in [0.05, 0.5, 2.0].into_iter().enumerate() {
        let a: Vec<f64> = shape.iter().map(|s| s * scale).collect();
        let rw = cost_reweighted(&base, &a).unwrap();
        let control = PiecewiseConstantControl::new(basis.clone(), a).unwrap();
        let direct = cost_direct(&params, &grid, &control, &init, PATHS, &seed(4).child(1 + i as u64)).unwrap();
        let combined = rw.estimate.std_error.hypot(direct.std_error);
        let z = (rw.estimate.mean - direct.mean).abs() / combined;
        let ok = z <= 3.0 && !rw.degenerate;
        pass &= ok;
        notes.push(format!(
            "|a|inf = {scale}: reweighted {:.4e} vs direct {:.4e}, z = {z:.2}, ESS = {:.1}{}",
            rw.estimate.mean,
            direct.mean,
            rw.effective_sample_size,
            if rw.degenerate { " (degenerate)" } else { "" }
        ));
    }
    Outcome::new(pass, notes.join("; "))
}

fn cosine_mode(g: &GridDensity) -> f64 {
    (0..g.len())
        .map(|i| g.values()[i] * (TAU * g.centre(i)).cos())
        .sum::<f64>()
        * g.dx()
}

fn heat_run(n: usize, dt: f64) -> GridDensity {
    let params = ModelParams {
        k: 0.0,
        k_leader: 0.0,
        ..ModelParams::hegselmann_krause()
    };
    let mut solver = FokkerPlanck::new(params, n).unwrap();
    let mut g = GridDensity::from_fn(n, |x| 1.0 + 0.5 * (TAU * x).cos()).unwrap();
    for _ in 0..(1.0 / dt).round() as usize {
        solver.step(&mut g, 0.0, dt).unwrap();
    }
    g
}

fn criterion_5() -> Outcome {
    let params = ModelParams::hegselmann_krause();
    let mut notes = Vec::new();

    let system = MeanFieldSystem::new(params, 1e-3, 64).unwrap();
    let init = MeanFieldState {
        density: paper_g0(64),
        leader: 0.8,
    };
    let controls: Vec<f64> = (0..10_000).map(|j| if (j / 500) % 2 == 0 { 0.7 } else { -0.4 }).collect();
    let (_, states) = system.trajectory(&init, &controls, &seed(5)).unwrap();
    let mass_err = states.iter().map(|s| (s.density.mass() - 1.0).abs()).fold(0.0, f64::max);
    let min = states
        .iter()
        .flat_map(|s| s.density.values().iter().cloned())
        .fold(f64::INFINITY, f64::min);
    let conserved = mass_err <= 1e-9 && min >= -1e-14;
    notes.push(format!("10^4 steps: mass error {mass_err:.2e}, min density {min:.3e}"));

    let dx = 1.0 / 64.0;
    let formula = dx * dx / (2.0 * dx * 15.0 * 0.15 + 0.0025);
    let cfl = cfl_max_dt(&params, dx);
    let cfl_ok = (cfl - formula).abs() <= 1e-12 * formula;
    notes.push(format!("CFL bound at n = 64: {cfl:.4e} (formula {formula:.4e})"));

    let sigma = params.sigma;
    let exact = TAU * TAU * sigma * sigma / 2.0;
    let g0 = GridDensity::from_fn(64, |x| 1.0 + 0.5 * (TAU * x).cos()).unwrap();
    let rate = -(cosine_mode(&heat_run(64, 1e-3)) / cosine_mode(&g0)).ln();
    let rate_err = (rate / exact - 1.0).abs();
    notes.push(format!("heat decay rate rel. error {rate_err:.2e}"));

    let error = |n: usize| {
        let g = heat_run(n, 1e-4);
        (0..n)
            .map(|i| (g.values()[i] - (1.0 + 0.5 * (-exact).exp() * (TAU * g.centre(i)).cos())).abs())
            .fold(0.0, f64::max)
    };
    let (e32, e64, e128) = (error(32), error(64), error(128));
    let (p1, p2) = ((e32 / e64).log2(), (e64 / e128).log2());
    notes.push(format!("spatial orders {p1:.3}, {p2:.3}"));

    let pass = conserved && cfl_ok && rate_err <= 0.01 && p1 >= 1.9 && p2 >= 1.9;
    Outcome::new(pass, notes.join("; "))
}

fn criterion_6() -> Outcome {
    let grid = TimeGrid::with_dt(1.0, 1e-3).unwrap();
    let control = PiecewiseConstantControl::zero(Basis::uniform(1.0, 5).unwrap());
    let setup = CouplingSetup::new(paper_g0(128), 0.8);
    let n_list = [16, 32, 64, 128, 256];
    let table = convergence_study(
        &ModelParams::hegselmann_krause(),
        &grid,
        &control,
        &setup,
        &n_list,
        REPLICATIONS,
        &seed(6),
    )
    .unwrap();
    let fit = fit_slope(&table, 2000, 0.95, DEFAULT_SEED).unwrap();
    let slope_ok = fit.ci_high <= -0.4;

    let decoupled = ModelParams {
        k_leader: 0.0,
        ..ModelParams::hegselmann_krause()
    };
    let table0 = convergence_study(&decoupled, &grid, &control, &setup, &[16, 64, 256], 5, &seed(6).child(1)).unwrap();
    let leader_zero = table0.records.iter().all(|r| r.sup_dy_sq == 0.0);
    let means: Vec<f64> = table.rows.iter().map(|r| r.mean_w2_sq).collect();
    Outcome::new(
        slope_ok && leader_zero,
        format!(
            "slope {:.3}, 95% CI [{:.3}, {:.3}] (upper <= -0.4); means {}; k_L = 0 leader statistic exactly 0: {leader_zero}",
            fit.slope,
            fit.ci_low,
            fit.ci_high,
            fmt_vec(&means)
        ),
    )
}

fn markov_options() -> MarkovOptions {
    MarkovOptions {
        first_stage: OracleMode::monte_carlo(PATHS),
        later_stages: OracleMode::monte_carlo(REPLAN_PATHS),
        newton: NewtonOptions::default(),
    }
}

/// Paired comparison of receding-horizon and zero control over
/// `REPLICATIONS` realised noise paths.
struct MarkovComparison {
    markov: EstimateWithError,
    zero: EstimateWithError,
    gain: EstimateWithError,
}

#[allow(clippy::too_many_arguments)]
fn compare_markov<S: ControlledSystem>(
    system: &S,
    sched: &StepSchedule,
    init: &S::State,
    first: &NewtonReport,
    opts: &MarkovOptions,
    plan_seed: &SeedSpec,
    realised: &SeedSpec,
    replications: usize,
) -> MarkovComparison {
    let mut markov = Vec::new();
    let mut zero = Vec::new();
    for rep in 0..replications {
        let r = realised.path(rep as u64);
        let res = markov_solve(system, sched, init, &first.final_a, opts, plan_seed, &r, Some(first)).unwrap();
        let z = realised_run(system, sched, init, &vec![0.0; sched.intervals()], &r).unwrap();
        markov.push(res.path.final_fraction);
        zero.push(z.final_fraction);
    }
    let gain: Vec<f64> = markov.iter().zip(&zero).map(|(m, z)| m - z).collect();
    MarkovComparison {
        markov: EstimateWithError::from_samples(&markov),
        zero: EstimateWithError::from_samples(&zero),
        gain: EstimateWithError::from_samples(&gain),
    }
}

fn markov_outcome(c: &MarkovComparison, threshold: f64) -> (bool, String) {
    let lower = c.gain.mean - Z95 * c.gain.std_error;
    let pass = lower > 0.0 && c.markov.mean > threshold;
    (
        pass,
        format!(
            "fraction within R at T: Markov {:.3} ± {:.3}, zero {:.3} ± {:.3}, paired gain lower 95% bound {lower:.3} (> 0), Markov mean > {threshold}",
            c.markov.mean, c.markov.std_error, c.zero.mean, c.zero.std_error
        ),
    )
}

fn particle_markov(sigma: f64, threshold: f64, criterion: u64, with_cost_check: bool) -> Outcome {
    let system = ParticleSystem::new(paper_params(sigma), DT).unwrap();
    let sched = paper_schedule(DT);
    let init = paper_init(99);
    let opts = markov_options();
    let plan_seed = seed(criterion).child(0);
    let first = plan_first_stage(&system, &sched, &init, &[0.0; 5], &opts, &plan_seed).unwrap();
    let mut pass = true;
    let mut notes = Vec::new();
    if with_cost_check {
        // fresh paths, shared between the two controls
        let fresh = seed(criterion).child(1);
        let a = simulate_batch(&system, &init, &sched, &first.final_a, PATHS, &fresh).unwrap().path_costs();
        let z = simulate_batch(&system, &init, &sched, &[0.0; 5], PATHS, &fresh).unwrap().path_costs();
        let d: Vec<f64> = a.iter().zip(&z).map(|(x, y)| x - y).collect();
        let d = EstimateWithError::from_samples(&d);
        let upper = d.mean + Z95 * d.std_error;
        let ok = upper < 0.0;
        pass &= ok;
        notes.push(format!(
            "(a) a_final = {}, J(a_final) - J(0) = {:.4e} ± {:.1e}, upper 95% bound {upper:.3e} (< 0): {}",
            fmt_vec(&first.final_a),
            d.mean,
            d.std_error,
            if ok { "PASS" } else { "FAIL" }
        ));
    }
    let c = compare_markov(
        &system,
        &sched,
        &init,
        &first,
        &opts,
        &plan_seed,
        &seed(criterion).child(2),
        REPLICATIONS,
    );
    let (ok, detail) = markov_outcome(&c, threshold);
    pass &= ok;
    notes.push(format!("(b) {detail}: {}", if ok { "PASS" } else { "FAIL" }));
    Outcome::new(pass, notes.join("; "))
}

fn criterion_7() -> Outcome {
    particle_markov(0.05, 0.6, 7, true)
}

fn criterion_8() -> Outcome {
    let params = ModelParams::hegselmann_krause();
    let dt = 2e-3;
    let grid = TimeGrid::with_dt(1.0, dt).unwrap();
    let sched = Basis::uniform(1.0, 5).unwrap().schedule(&grid).unwrap();
    let system = MeanFieldSystem::new(params, dt, 64).unwrap();
    let init = MeanFieldState {
        density: paper_g0(64),
        leader: 0.8,
    };
    let opts = MarkovOptions {
        first_stage: OracleMode::monte_carlo(4000),
        later_stages: OracleMode::monte_carlo(1000),
        newton: NewtonOptions::default(),
    };
    let plan_seed = seed(8).child(0);
    let first = plan_first_stage(&system, &sched, &init, &[0.0; 5], &opts, &plan_seed).unwrap();
    let c = compare_markov(&system, &sched, &init, &first, &opts, &plan_seed, &seed(8).child(1), 10);
    let pass = c.markov.mean >= 0.6 && c.zero.mean < 0.5;
    Outcome::new(
        pass,
        format!(
            "mass within R of the leader at T over 10 replications: Markov {:.3} ± {:.3} (>= 0.6), zero {:.3} ± {:.3} (< 0.5)",
            c.markov.mean, c.markov.std_error, c.zero.mean, c.zero.std_error
        ),
    )
}

fn criterion_9() -> Outcome {
    let a = particle_markov(0.1, 0.5, 91, false);
    let b = particle_markov(0.2, 0.4, 92, false);
    Outcome::new(
        a.pass && b.pass,
        format!("sigma = 0.1: {}; sigma = 0.2: {}", a.detail, b.detail),
    )
}

type Criterion = (u32, &'static str, fn() -> Outcome);

fn main() {
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [Criterion; 9] = [
        (1, "score martingale moments", criterion_1),
        (2, "pure-control closed forms", criterion_2),
        (3, "finite-difference gradient", criterion_3),
        (4, "Girsanov reweighting", criterion_4),
        (5, "Fokker-Planck solver", criterion_5),
        (6, "propagation of chaos", criterion_6),
        (7, "consensus under Newton and receding-horizon control", criterion_7),
        (8, "mean-field receding-horizon control", criterion_8),
        (9, "noise robustness", criterion_9),
    ];
    let mut failed = Vec::new();
    let mut ran = 0;
    for (id, name, run) in criteria {
        if !args.is_empty() && !args.iter().any(|a| a == &id.to_string()) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let o = run();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "{verdict} criterion {id} ({name}) [{:.0} s]: {}",
            start.elapsed().as_secs_f64(),
            o.detail
        );
        if !o.pass {
            failed.push(id);
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        if std::env::var("MFC_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
