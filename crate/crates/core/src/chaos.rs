//! Propagation of chaos by synchronous coupling.
//!
//! A finite-N particle system and the Fokker–Planck system are driven by the
//! same leader-noise stream and the same control; followers start i.i.d. from
//! the grid density used as the Fokker–Planck initial condition. Per run we
//! record `max_j W2²(μ_{X^N_{t_j}}, g_{t_j})` and `max_j |Y^N_{t_j} − Ȳ_{t_j}|²`
//! over the grid nodes.
//!
//! The W2 statistic carries a resolution floor of the order of the grid
//! width; nothing is subtracted from it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::PiecewiseConstantControl;
use crate::dynamics::{ParticleSystem, SystemState};
use crate::error::{Error, Result};
use crate::meanfield::{GridDensity, MeanFieldState, MeanFieldSystem};
use crate::params::{ModelParams, TimeGrid};
use crate::rng::{SeedSpec, Stream};
use crate::system::ControlledSystem;
use crate::torus::{geodesic_disp, wrap_f64};
use crate::transport::{default_quantile_count, w2_circle_density, EmpiricalMeasure};

/// Statistics of one coupled run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChaosRecord {
    #[serde(rename = "N")]
    pub followers: usize,
    pub rep: usize,
    pub sup_w2_sq: f64,
    pub sup_dy_sq: f64,
}

/// Shared initial law and numerical settings of a coupling study.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingSetup {
    pub g0: GridDensity,
    pub leader0: f64,
    /// Lower bound on the number of quantile atoms used for W2 against the
    /// grid density.
    pub min_quantiles: usize,
}

impl CouplingSetup {
    pub fn new(g0: GridDensity, leader0: f64) -> Self {
        Self {
            g0,
            leader0: wrap_f64(leader0),
            min_quantiles: 512,
        }
    }
}

/// One synchronously coupled run with `n_followers` particles.
pub fn coupled_run(
    params: &ModelParams,
    grid: &TimeGrid,
    control: &PiecewiseConstantControl,
    setup: &CouplingSetup,
    n_followers: usize,
    seed: &SeedSpec,
) -> Result<ChaosRecord> {
    if n_followers == 0 {
        return Err(Error::InvalidParameter("need at least one follower".into()));
    }
    let controls = control.basis.schedule(grid)?.controls(&control.coeffs)?;
    let cells = setup.g0.len();
    let mean_field = MeanFieldSystem::new(*params, grid.dt, cells)?;
    let particles = ParticleSystem::new(
        ModelParams {
            followers: n_followers,
            ..*params
        },
        grid.dt,
    )?;

    let mut init_rng = seed.rng(Stream::InitialConditions);
    let followers = setup.g0.sample(&mut init_rng, n_followers);
    let init = SystemState::new(followers, setup.leader0)?;
    let mf_init = MeanFieldState {
        density: setup.g0.clone(),
        leader: setup.leader0,
    };

    // both systems draw their leader increments from seed's LeaderNoise stream
    let (_, xs) = particles.trajectory(&init, &controls, seed)?;
    let (_, gs) = mean_field.trajectory(&mf_init, &controls, seed)?;

    let m = default_quantile_count(n_followers, setup.min_quantiles);
    let mut sup_w2_sq: f64 = 0.0;
    let mut sup_dy_sq: f64 = 0.0;
    for (x, g) in xs.iter().zip(&gs) {
        let mu = EmpiricalMeasure::new(x.followers.clone())?;
        let w = w2_circle_density(&mu, &g.density, m)?;
        sup_w2_sq = sup_w2_sq.max(w * w);
        sup_dy_sq = sup_dy_sq.max(geodesic_disp(g.leader, x.leader).powi(2));
    }
    Ok(ChaosRecord {
        followers: n_followers,
        rep: 0,
        sup_w2_sq,
        sup_dy_sq,
    })
}

/// Per-N averages of the two statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChaosRow {
    #[serde(rename = "N")]
    pub followers: usize,
    pub reps: usize,
    pub mean_w2_sq: f64,
    pub se_w2_sq: f64,
    pub mean_dy_sq: f64,
    pub se_dy_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChaosTable {
    pub rows: Vec<ChaosRow>,
    pub records: Vec<ChaosRecord>,
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

impl ChaosTable {
    /// Groups records by N (ascending).
    pub fn from_records(mut records: Vec<ChaosRecord>) -> Self {
        records.sort_by_key(|r| (r.followers, r.rep));
        let mut rows = Vec::new();
        for chunk in records.chunk_by(|a, b| a.followers == b.followers) {
            let w: Vec<f64> = chunk.iter().map(|r| r.sup_w2_sq).collect();
            let d: Vec<f64> = chunk.iter().map(|r| r.sup_dy_sq).collect();
            let (mean_w2_sq, se_w2_sq) = mean_se(&w);
            let (mean_dy_sq, se_dy_sq) = mean_se(&d);
            rows.push(ChaosRow {
                followers: chunk[0].followers,
                reps: chunk.len(),
                mean_w2_sq,
                se_w2_sq,
                mean_dy_sq,
                se_dy_sq,
            });
        }
        Self { rows, records }
    }
}

/// Seed of replication `rep`. It does not depend on N: a replication shares
/// its leader path across all sizes, and since follower draws and follower
/// noise streams are indexed, the smaller systems start from a prefix of the
/// larger ones' initial positions.
pub fn replication_seed(seed: &SeedSpec, rep: usize) -> SeedSpec {
    seed.path(rep as u64)
}

/// Runs `reps` coupled replications for each N in `n_list`.
pub fn convergence_study(
    params: &ModelParams,
    grid: &TimeGrid,
    control: &PiecewiseConstantControl,
    setup: &CouplingSetup,
    n_list: &[usize],
    reps: usize,
    seed: &SeedSpec,
) -> Result<ChaosTable> {
    if n_list.is_empty() {
        return Err(Error::InvalidParameter("the list of N is empty".into()));
    }
    if n_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter(
            "the list of N must be strictly ascending".into(),
        ));
    }
    if reps < 5 {
        return Err(Error::InvalidParameter(format!(
            "need at least 5 replications (got {reps})"
        )));
    }
    let jobs: Vec<(usize, usize)> = n_list
        .iter()
        .flat_map(|&n| (0..reps).map(move |r| (n, r)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(n, rep)| {
            let s = replication_seed(seed, rep);
            coupled_run(params, grid, control, setup, n, &s).map(|r| ChaosRecord { rep, ..r })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ChaosTable::from_records(records))
}

/// Least-squares slope of `log mean` against `log N` with a percentile
/// bootstrap interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
    pub resamples: usize,
}

fn ls_slope(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Fits the decay exponent of `E[sup W2²]`. When every N has the same set
/// of replication ids the bootstrap resamples whole replications (keeping
/// the pairing across N); otherwise it resamples within each N.
pub fn fit_slope(table: &ChaosTable, resamples: usize, level: f64, seed: u64) -> Result<SlopeFit> {
    if table.rows.len() < 3 {
        return Err(Error::InvalidParameter(format!(
            "need at least 3 values of N (got {})",
            table.rows.len()
        )));
    }
    if let Some(r) = table.rows.iter().find(|r| !(r.mean_w2_sq > 0.0)) {
        return Err(Error::InvalidParameter(format!(
            "mean statistic at N = {} is not positive ({})",
            r.followers, r.mean_w2_sq
        )));
    }
    if !(level > 0.0 && level < 1.0) || resamples == 0 {
        return Err(Error::InvalidParameter(
            "bootstrap needs resamples >= 1 and a level in (0, 1)".into(),
        ));
    }
    let x: Vec<f64> = table.rows.iter().map(|r| (r.followers as f64).ln()).collect();
    let y: Vec<f64> = table.rows.iter().map(|r| r.mean_w2_sq.ln()).collect();
    let (slope, intercept) = ls_slope(&x, &y);

    let groups: Vec<Vec<ChaosRecord>> = table
        .rows
        .iter()
        .map(|row| {
            let mut g: Vec<ChaosRecord> = table
                .records
                .iter()
                .filter(|r| r.followers == row.followers)
                .copied()
                .collect();
            g.sort_by_key(|r| r.rep);
            g
        })
        .collect();
    let ids = |g: &Vec<ChaosRecord>| g.iter().map(|r| r.rep).collect::<Vec<_>>();
    let paired = !groups[0].is_empty() && groups.iter().all(|g| ids(g) == ids(&groups[0]));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slopes = Vec::with_capacity(resamples);
    let mut picks = Vec::new();
    for _ in 0..resamples {
        if paired {
            let reps = groups[0].len();
            picks.clear();
            picks.extend((0..reps).map(|_| rng.random_range(0..reps)));
        }
        let yb: Vec<f64> = groups
            .iter()
            .zip(&table.rows)
            .map(|(g, row)| {
                if g.is_empty() {
                    return row.mean_w2_sq.ln();
                }
                let s: f64 = if paired {
                    picks.iter().map(|&i| g[i].sup_w2_sq).sum()
                } else {
                    (0..g.len()).map(|_| g[rng.random_range(0..g.len())].sup_w2_sq).sum()
                };
                (s / g.len() as f64).ln()
            })
            .collect();
        let (b, _) = ls_slope(&x, &yb);
        if b.is_finite() {
            slopes.push(b);
        }
    }
    if slopes.is_empty() {
        return Err(Error::InvalidParameter(
            "every bootstrap resample had a non-positive mean".into(),
        ));
    }
    slopes.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    Ok(SlopeFit {
        slope,
        intercept,
        ci_low: quantile(&slopes, alpha / 2.0),
        ci_high: quantile(&slopes, 1.0 - alpha / 2.0),
        level,
        resamples,
    })
}
