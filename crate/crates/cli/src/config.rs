//! Experiment configuration: scenario defaults, TOML overlay and validation.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use mfc_core::control::Basis;
use mfc_core::dynamics::{Kernel, RunningCost};
use mfc_core::estimators::EstimatorOptions;
use mfc_core::meanfield::cfl_max_dt;
use mfc_core::optimize::NewtonOptions;
use mfc_core::params::{ModelParams, TimeGrid};
use mfc_core::rng::DEFAULT_SEED;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
pub enum Scenario {
    #[serde(rename = "fig1")]
    #[value(name = "fig1")]
    Fig1,
    #[serde(rename = "fig2-3")]
    #[value(name = "fig2-3")]
    Fig2_3,
    #[serde(rename = "fig4-sigma01")]
    #[value(name = "fig4-sigma01")]
    Fig4Sigma01,
    #[serde(rename = "fig4-sigma02")]
    #[value(name = "fig4-sigma02")]
    Fig4Sigma02,
    #[serde(rename = "fig5")]
    #[value(name = "fig5")]
    Fig5,
    #[serde(rename = "chaos")]
    #[value(name = "chaos")]
    Chaos,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Fig1 => "fig1",
            Scenario::Fig2_3 => "fig2-3",
            Scenario::Fig4Sigma01 => "fig4-sigma01",
            Scenario::Fig4Sigma02 => "fig4-sigma02",
            Scenario::Fig5 => "fig5",
            Scenario::Chaos => "chaos",
        }
    }

    pub fn parse(name: &str) -> Result<Self, CliError> {
        <Scenario as ValueEnum>::from_str(name, false).map_err(|_| {
            let known: Vec<&str> = Scenario::value_variants().iter().map(|s| s.name()).collect();
            CliError::Config(format!("unknown scenario {name:?} (expected one of {})", known.join(", ")))
        })
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    /// `0 = t_0 < … < t_m = T`.
    pub breakpoints: Vec<f64>,
    /// Starting coefficients; also the control used by `simulate` and
    /// `meanfield`.
    pub initial: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub leader: f64,
    /// Explicit follower positions; drawn from the two-cluster mixture when
    /// absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub followers: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsConfig {
    pub kernel: Kernel,
    pub running_cost: RunningCost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloConfig {
    /// Paths per evaluation of the first (or only) solve.
    pub paths: usize,
    /// Paths per evaluation of the re-planning solves.
    pub replan_paths: usize,
    /// Sample paths written out for plotting.
    pub trajectories: usize,
    /// Independent realised runs of the receding-horizon controller.
    pub replications: usize,
    pub estimator: EstimatorOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanFieldConfig {
    pub cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChaosConfig {
    pub followers: Vec<usize>,
    pub replications: usize,
    pub cells: usize,
    pub min_quantiles: usize,
    pub bootstrap: usize,
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckConfig {
    /// Relative finite-difference step.
    pub step: f64,
    /// Paths per side of each central difference.
    pub fd_paths: usize,
    /// Coefficients at which to check; `control.initial` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<Vec<f64>>,
    /// Largest accepted relative error over resolved components.
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelParams,
    pub grid: GridConfig,
    pub control: ControlConfig,
    pub initial: InitialConfig,
    pub dynamics: DynamicsConfig,
    pub monte_carlo: MonteCarloConfig,
    pub newton: NewtonOptions,
    pub meanfield: MeanFieldConfig,
    pub chaos: ChaosConfig,
    pub check: CheckConfig,
}

/// Published parameters of each scenario.
pub fn default_config(scenario: Scenario) -> ExperimentConfig {
    let mut model = ModelParams::hegselmann_krause();
    match scenario {
        Scenario::Fig4Sigma01 => model.sigma = 0.1,
        Scenario::Fig4Sigma02 => model.sigma = 0.2,
        _ => {}
    }
    ExperimentConfig {
        scenario,
        seed: DEFAULT_SEED,
        output_dir: PathBuf::from("out").join(scenario.name()),
        model,
        grid: GridConfig { dt: 1e-3 },
        control: ControlConfig {
            breakpoints: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            initial: vec![0.0; 5],
        },
        initial: InitialConfig {
            leader: 0.8,
            followers: None,
        },
        dynamics: DynamicsConfig {
            kernel: Kernel::Indicator,
            running_cost: RunningCost::Consensus,
        },
        monte_carlo: MonteCarloConfig {
            paths: 10_000,
            replan_paths: 10_000,
            trajectories: 10,
            replications: 20,
            estimator: EstimatorOptions::default(),
        },
        newton: NewtonOptions::default(),
        meanfield: MeanFieldConfig { cells: 64 },
        chaos: ChaosConfig {
            followers: vec![16, 64, 256, 1024, 4096],
            replications: 20,
            cells: 128,
            min_quantiles: 512,
            bootstrap: 2000,
            level: 0.95,
        },
        check: CheckConfig {
            step: 1e-2,
            fd_paths: 10_000,
            point: None,
            tolerance: 0.05,
        },
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Parses `text` as an overlay on the defaults of its `scenario` (`fig1`
/// when absent). Unknown keys are rejected.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, CliError> {
    let overlay: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| CliError::Config(format!("malformed TOML: {e}")))?;
    let scenario = match overlay.get("scenario") {
        None => Scenario::Fig1,
        Some(toml::Value::String(s)) => Scenario::parse(s)?,
        Some(v) => return Err(CliError::Config(format!("scenario must be a string (got {v})"))),
    };
    let mut table = toml::Table::try_from(default_config(scenario))
        .map_err(|e| CliError::Config(format!("cannot serialise defaults: {e}")))?;
    merge(&mut table, overlay);
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))
}

/// Reads a config file and applies the `MFC_SEED` override.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = parse_config(&text)?;
    if let Ok(seed) = std::env::var("MFC_SEED") {
        cfg.seed = seed
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("MFC_SEED must be an unsigned integer (got {seed:?})")))?;
    }
    Ok(cfg)
}

pub fn to_toml(cfg: &ExperimentConfig) -> String {
    toml::to_string(cfg).expect("configs serialise to TOML")
}

/// TOML of everything that determines the results, i.e. without the
/// output location.
pub fn canonical_toml(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.output_dir = PathBuf::from(".");
    to_toml(&c)
}

impl ExperimentConfig {
    pub fn time_grid(&self) -> mfc_core::error::Result<TimeGrid> {
        TimeGrid::with_dt(self.model.horizon, self.grid.dt)
    }

    pub fn basis(&self) -> mfc_core::error::Result<Basis> {
        Basis::new(self.control.breakpoints.clone())
    }
}

/// Every violated constraint, empty when the configuration is usable.
pub fn validate_config(cfg: &ExperimentConfig) -> Vec<String> {
    let mut v = cfg.model.violations();
    let grid = match cfg.time_grid() {
        Ok(g) => Some(g),
        Err(e) => {
            v.push(format!("grid: {e}"));
            None
        }
    };
    match cfg.basis() {
        Ok(basis) => {
            if (basis.horizon() - cfg.model.horizon).abs() > 1e-12 {
                v.push(format!(
                    "control: last breakpoint {} differs from the horizon {}",
                    basis.horizon(),
                    cfg.model.horizon
                ));
            } else if let Some(grid) = grid {
                if let Err(e) = basis.schedule(&grid) {
                    v.push(format!("control: {e}"));
                }
            }
            if cfg.control.initial.len() != basis.len() {
                v.push(format!(
                    "control: {} initial coefficients for {} intervals",
                    cfg.control.initial.len(),
                    basis.len()
                ));
            }
            if let Some(p) = &cfg.check.point {
                if p.len() != basis.len() {
                    v.push(format!("check: point has {} coefficients for {} intervals", p.len(), basis.len()));
                }
            }
        }
        Err(e) => v.push(format!("control: {e}")),
    }
    if cfg.control.initial.iter().any(|a| !a.is_finite()) {
        v.push("control: initial coefficients must be finite".into());
    }
    if !cfg.initial.leader.is_finite() {
        v.push("initial: leader must be finite".into());
    }
    if let Some(x) = &cfg.initial.followers {
        if x.len() != cfg.model.followers {
            v.push(format!(
                "initial: {} follower positions for N = {}",
                x.len(),
                cfg.model.followers
            ));
        }
        if x.iter().any(|x| !x.is_finite()) {
            v.push("initial: follower positions must be finite".into());
        }
    }
    if let Kernel::Smoothed { width } = cfg.dynamics.kernel {
        if !(width > 0.0) {
            v.push(format!("dynamics: smoothed kernel width must be > 0 (got {width})"));
        }
    }
    let mc = &cfg.monte_carlo;
    if mc.paths < 2 || mc.replan_paths < 2 {
        v.push("monte_carlo: paths and replan_paths must be >= 2".into());
    }
    if mc.trajectories == 0 {
        v.push("monte_carlo: trajectories must be >= 1".into());
    }
    if mc.replications == 0 {
        v.push("monte_carlo: replications must be >= 1".into());
    }
    let nw = &cfg.newton;
    if let Some(tol) = nw.tol {
        if !(tol > 0.0) {
            v.push(format!("newton: tol must be > 0 (got {tol})"));
        }
    }
    if !(nw.max_step > 0.0) {
        v.push(format!("newton: max_step must be > 0 (got {})", nw.max_step));
    }
    if !(nw.descent_se >= 0.0) {
        v.push(format!("newton: descent_se must be >= 0 (got {})", nw.descent_se));
    }
    if nw.max_iter == 0 {
        v.push("newton: max_iter must be >= 1".into());
    }
    let ck = &cfg.check;
    if !(ck.step > 0.0) {
        v.push(format!("check: step must be > 0 (got {})", ck.step));
    }
    if ck.fd_paths < 2 {
        v.push("check: fd_paths must be >= 2".into());
    }
    if !(ck.tolerance > 0.0) {
        v.push(format!("check: tolerance must be > 0 (got {})", ck.tolerance));
    }
    v
}

fn check_cells(cfg: &ExperimentConfig, section: &str, cells: usize, v: &mut Vec<String>) {
    if cells < 3 {
        v.push(format!("{section}: need at least 3 cells (got {cells})"));
    } else if cfg.model.violations().is_empty() && cfg.grid.dt > 0.0 {
        let max_dt = cfl_max_dt(&cfg.model, 1.0 / cells as f64);
        if cfg.grid.dt > max_dt * (1.0 + 1e-12) {
            v.push(format!(
                "{section}: dt = {} exceeds the positivity bound {max_dt:.4e} for {cells} cells",
                cfg.grid.dt
            ));
        }
    }
}

/// Constraints of the density–leader runs.
pub fn validate_meanfield(cfg: &ExperimentConfig) -> Vec<String> {
    let mut v = Vec::new();
    check_cells(cfg, "meanfield", cfg.meanfield.cells, &mut v);
    v
}

/// Constraints of the coupled convergence study.
pub fn validate_chaos(cfg: &ExperimentConfig) -> Vec<String> {
    let mut v = Vec::new();
    check_cells(cfg, "chaos", cfg.chaos.cells, &mut v);
    let ch = &cfg.chaos;
    if ch.followers.is_empty() {
        v.push("chaos: the list of followers is empty".into());
    } else if ch.followers.contains(&0) || ch.followers.windows(2).any(|w| w[1] <= w[0]) {
        v.push("chaos: followers must be positive and strictly increasing".into());
    } else if ch.followers.len() < 3 {
        v.push("chaos: need at least 3 values of N to fit a slope".into());
    }
    if ch.replications < 5 {
        v.push(format!("chaos: need at least 5 replications (got {})", ch.replications));
    }
    if ch.min_quantiles == 0 {
        v.push("chaos: min_quantiles must be >= 1".into());
    }
    if ch.bootstrap < 100 {
        v.push(format!("chaos: need at least 100 bootstrap resamples (got {})", ch.bootstrap));
    }
    if !(ch.level > 0.0 && ch.level < 1.0) {
        v.push(format!("chaos: level must lie in (0, 1) (got {})", ch.level));
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_defaults() {
        let f = default_config(Scenario::Fig1);
        assert_eq!(f.model.sigma, 0.05);
        assert_eq!(f.model.followers, 99);
        assert_eq!(f.control.initial.len(), 5);
        assert_eq!(f.monte_carlo.paths, 10_000);
        assert_eq!(default_config(Scenario::Fig4Sigma01).model.sigma, 0.1);
        assert_eq!(default_config(Scenario::Fig4Sigma02).model.sigma, 0.2);
        assert_eq!(default_config(Scenario::Fig5).meanfield.cells, 64);
        for s in Scenario::value_variants() {
            assert!(validate_config(&default_config(*s)).is_empty(), "{s}");
        }
        assert!(validate_meanfield(&default_config(Scenario::Fig5)).is_empty());
        assert!(validate_chaos(&default_config(Scenario::Chaos)).is_empty());
    }

    #[test]
    fn unknown_scenario_rejected() {
        assert!(Scenario::parse("fig9").is_err());
        assert!(parse_config("scenario = \"fig9\"").is_err());
    }

    #[test]
    fn overlay_and_round_trip() {
        let cfg = parse_config("scenario = \"fig2-3\"\n[model]\nsigma = 0.3\n[grid]\ndt = 0.01\n").unwrap();
        assert_eq!(cfg.model.sigma, 0.3);
        assert_eq!(cfg.model.k, 10.0);
        assert_eq!(cfg.grid.dt, 0.01);
        assert_eq!(parse_config(&to_toml(&cfg)).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(parse_config("[model]\nsigmaa = 0.1\n").is_err());
        assert!(parse_config("colour = 1\n").is_err());
        assert!(parse_config("[newton]\nmax_iters = 3\n").is_err());
    }

    #[test]
    fn invalid_model_reported() {
        let mut cfg = default_config(Scenario::Fig1);
        cfg.model.radius = 0.6;
        cfg.model.lambda = 0.0;
        let v = validate_config(&cfg);
        assert!(v.iter().any(|s| s.contains("radius")), "{v:?}");
        assert!(v.iter().any(|s| s.contains("lambda")), "{v:?}");
    }

    #[test]
    fn cfl_and_chaos_lists_checked() {
        let mut cfg = default_config(Scenario::Fig5);
        cfg.grid.dt = 0.01;
        assert!(validate_config(&cfg).is_empty());
        assert!(validate_meanfield(&cfg).iter().any(|s| s.contains("positivity")));
        let mut cfg = default_config(Scenario::Chaos);
        cfg.chaos.followers.clear();
        assert!(validate_chaos(&cfg).iter().any(|s| s.contains("empty")));
        cfg.chaos.followers = vec![64, 16, 256];
        assert!(validate_chaos(&cfg).iter().any(|s| s.contains("increasing")));
    }

    #[test]
    fn misaligned_breakpoints_reported() {
        let mut cfg = default_config(Scenario::Fig1);
        cfg.grid.dt = 0.3;
        assert!(!validate_config(&cfg).is_empty());
        let mut cfg = default_config(Scenario::Fig1);
        cfg.control.initial = vec![0.0; 4];
        assert!(validate_config(&cfg).iter().any(|s| s.contains("initial coefficients")));
    }
}
