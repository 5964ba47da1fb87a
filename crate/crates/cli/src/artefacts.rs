//! CSV/JSON artefact writers and the run manifest.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use mfc_core::dynamics::SystemState;
use mfc_core::meanfield::MeanFieldState;
use mfc_core::optimize::NewtonIterate;
use mfc_core::params::TimeGrid;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{canonical_toml, ExperimentConfig};
use crate::error::CliError;

fn num(x: f64) -> String {
    format!("{x}")
}

/// Output directory of one run; remembers what was written for the
/// manifest.
pub struct Artefacts {
    dir: PathBuf,
    files: Vec<String>,
    started: Instant,
}

#[derive(Serialize)]
struct Manifest<'a> {
    scenario: &'a str,
    config_hash: String,
    files: &'a [String],
    seed: u64,
    wall_time_s: f64,
}

impl Artefacts {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Run(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            started: Instant::now(),
        })
    }

    fn register(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        self.dir.join(name)
    }

    pub fn csv(&mut self, name: &str, header: &[String]) -> Result<csv::Writer<File>, CliError> {
        let mut w = csv::Writer::from_path(self.register(name))?;
        w.write_record(header)?;
        Ok(w)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut w = BufWriter::new(File::create(self.register(name))?);
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    pub fn text(&mut self, name: &str, body: &str) -> Result<(), CliError> {
        std::fs::write(self.register(name), body)?;
        Ok(())
    }

    /// Writes `manifest.json`; call last.
    pub fn finish(mut self, cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
        let hash = Sha256::digest(canonical_toml(cfg).as_bytes());
        let files = std::mem::take(&mut self.files);
        let manifest = Manifest {
            scenario: cfg.scenario.name(),
            config_hash: hex::encode(hash),
            files: &files,
            seed: cfg.seed,
            wall_time_s: self.started.elapsed().as_secs_f64(),
        };
        self.json("manifest.json", &manifest)?;
        Ok(self.dir)
    }
}

pub fn trajectory_header(followers: usize) -> Vec<String> {
    let mut h: Vec<String> = ["path_id", "step", "t", "Y"].iter().map(|s| s.to_string()).collect();
    h.extend((0..followers).map(|i| format!("X_{i}")));
    h
}

pub fn write_trajectory(
    w: &mut csv::Writer<File>,
    path_id: usize,
    grid: &TimeGrid,
    states: &[SystemState],
) -> Result<(), CliError> {
    for (j, s) in states.iter().enumerate() {
        let mut row = vec![path_id.to_string(), j.to_string(), num(grid.time(j)), num(s.leader)];
        row.extend(s.followers.iter().map(|x| num(*x)));
        w.write_record(&row)?;
    }
    Ok(())
}

pub fn noise_header() -> Vec<String> {
    vec!["path_id".into(), "step".into(), "dBY".into()]
}

pub fn write_noise(w: &mut csv::Writer<File>, path_id: usize, dby: &[f64]) -> Result<(), CliError> {
    for (j, db) in dby.iter().enumerate() {
        w.write_record([path_id.to_string(), j.to_string(), num(*db)])?;
    }
    Ok(())
}

pub fn density_header(cells: usize) -> Vec<String> {
    let mut h: Vec<String> = ["path_id", "step", "t", "Y"].iter().map(|s| s.to_string()).collect();
    h.extend((0..cells).map(|i| format!("g_{i}")));
    h
}

pub fn write_density(
    w: &mut csv::Writer<File>,
    path_id: usize,
    grid: &TimeGrid,
    states: impl IntoIterator<Item = (f64, Vec<f64>)>,
) -> Result<(), CliError> {
    for (j, (y, g)) in states.into_iter().enumerate() {
        let mut row = vec![path_id.to_string(), j.to_string(), num(grid.time(j)), num(y)];
        row.extend(g.iter().map(|v| num(*v)));
        w.write_record(&row)?;
    }
    Ok(())
}

pub fn mean_field_rows(states: &[MeanFieldState]) -> impl Iterator<Item = (f64, Vec<f64>)> + '_ {
    states.iter().map(|s| (s.leader, s.density.values().to_vec()))
}

pub fn write_iterations(art: &mut Artefacts, name: &str, iterates: &[NewtonIterate]) -> Result<(), CliError> {
    let m = iterates.first().map_or(0, |it| it.a.len());
    let mut header = vec!["iter".to_string()];
    header.extend((1..=m).map(|k| format!("a_{k}")));
    header.extend(["J", "J_se", "grad_norm", "damping"].iter().map(|s| s.to_string()));
    let mut w = art.csv(name, &header)?;
    for it in iterates {
        let mut row = vec![it.iter.to_string()];
        row.extend(it.a.iter().map(|a| num(*a)));
        row.extend([num(it.cost), num(it.cost_se), num(it.grad_norm), num(it.damping)]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
