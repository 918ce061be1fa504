//! Execution of a validated [`RunConfig`]: CSV artifacts plus `summary.txt`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use strato_core::coeffs::fd_check_derivatives;
use strato_core::lions::Functional;
use strato_core::sim::simulate;
use strato_core::validate::{
    bracket_study, closedform_study, equivalence_study, lions_sweep, normal_cloud, write_summary, Criterion,
    StudyConfig,
};
use strato_core::{Coefficients, Error as CoreError, NoiseBundle, TimeGrid};

use crate::config::{Command, RunConfig};

pub const LIONS_SIZES: [usize; 3] = [2, 16, 128];
pub const LIONS_STEPS: [f64; 3] = [1e-3, 1e-4, 1e-5];
/// Absolute tolerance of `verify-derivatives`.
pub const DERIVATIVE_TOLERANCE: f64 = 1e-6;
const DERIVATIVE_SAMPLES: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] CoreError),
}

#[derive(Debug)]
pub struct RunOutcome {
    pub criteria: Vec<Criterion>,
    pub files: Vec<PathBuf>,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.criteria.iter().all(|c| c.passed)
    }
}

struct Output {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Output {
    fn create(&mut self, name: &str, body: impl FnOnce(&mut BufWriter<File>) -> Result<(), RunError>) -> Result<(), RunError> {
        let path = self.dir.join(name);
        let io = |source| RunError::Io { path: path.clone(), source };
        let mut w = BufWriter::new(File::create(&path).map_err(io)?);
        body(&mut w)?;
        w.flush().map_err(io)?;
        self.files.push(path);
        Ok(())
    }
}

fn study_config(cfg: &RunConfig) -> StudyConfig {
    StudyConfig {
        particles: cfg.particles,
        horizon: cfg.horizon,
        base_steps: cfg.n_steps,
        levels: cfg.levels,
        seeds: cfg.seeds,
        base_seed: cfg.base_seed,
        initial: cfg.initial.clone(),
        opts: cfg.opts,
    }
}

fn file_name(cfg: &RunConfig, label: &str, seed: u64) -> String {
    format!("{}_{label}_{seed}.csv", cfg.command.name())
}

pub fn run(cfg: &RunConfig) -> Result<RunOutcome, RunError> {
    fs::create_dir_all(&cfg.output_dir).map_err(|source| RunError::Io {
        path: cfg.output_dir.clone(),
        source,
    })?;
    let mut out = Output {
        dir: cfg.output_dir.clone(),
        files: Vec::new(),
    };
    let model = cfg.model.name();
    let criteria = match cfg.command {
        Command::Simulate => run_simulate(cfg, &mut out)?,
        Command::Equivalence => {
            let r = equivalence_study(&cfg.model, model, &study_config(cfg))?;
            out.create(&file_name(cfg, model, cfg.base_seed), |w| Ok(r.write_csv(w)?))?;
            r.criteria()
        }
        Command::ClosedForm => {
            let r = closedform_study(cfg.model, cfg.scheme, &study_config(cfg))?;
            out.create(&file_name(cfg, model, cfg.base_seed), |w| Ok(r.write_csv(w)?))?;
            r.criteria()
        }
        Command::Bracket => {
            let r = bracket_study(&cfg.model, model, cfg.scheme, &study_config(cfg))?;
            out.create(&file_name(cfg, model, cfg.base_seed), |w| Ok(r.write_csv(w)?))?;
            r.criteria()
        }
        Command::LionsSweep => {
            let r = lions_sweep(&Functional::GALLERY, &LIONS_SIZES, &LIONS_STEPS, cfg.base_seed)?;
            out.create(&file_name(cfg, "gallery", cfg.base_seed), |w| Ok(r.write_csv(w)?))?;
            r.criteria()
        }
        Command::VerifyDerivatives => run_verify(cfg, &mut out)?,
    };
    out.create("summary.txt", |w| {
        writeln!(w, "command: {}", cfg.command.name()).and_then(|_| {
            writeln!(w, "model: {}", cfg.model)?;
            write_summary(&criteria, &mut *w)
        })
        .map_err(|source| RunError::Io {
            path: cfg.output_dir.join("summary.txt"),
            source,
        })
    })?;
    Ok(RunOutcome {
        criteria,
        files: out.files,
    })
}

fn run_simulate(cfg: &RunConfig, out: &mut Output) -> Result<Vec<Criterion>, RunError> {
    let grid = TimeGrid::new(cfg.horizon, cfg.n_steps)?;
    let model = cfg.model.name();
    let mut criteria = Vec::new();
    for i in 0..cfg.seeds {
        let seed = strato_core::rng::replicate_seed(cfg.base_seed, i);
        let bundle = NoiseBundle::generate(seed, grid, cfg.particles, cfg.model.noise_dim())?;
        match simulate(&cfg.model, cfg.scheme, cfg.opts, &bundle, &cfg.initial, model) {
            Ok(path) => {
                out.create(&file_name(cfg, model, seed), |w| Ok(path.write_trajectory_csv(w)?))?;
                out.create(&format!("simulate-moments_{model}_{seed}.csv"), |w| {
                    Ok(path.write_summary_csv(w)?)
                })?;
                criteria.push(Criterion::new("simulate.finite", true, format!("seed {seed}: all states finite")));
            }
            Err(CoreError::NonFiniteState { step, particle }) => criteria.push(Criterion::new(
                "simulate.finite",
                false,
                format!("seed {seed}: non-finite state at step {step}, particle {particle}"),
            )),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(criteria)
}

fn run_verify(cfg: &RunConfig, out: &mut Output) -> Result<Vec<Criterion>, RunError> {
    let mu = normal_cloud(cfg.base_seed, cfg.particles);
    let d = cfg.model.state_dim();
    if d != 1 {
        return Err(CoreError::DimensionMismatch { expected: 1, got: d }.into());
    }
    let mut rows = Vec::new();
    for s in 0..DERIVATIVE_SAMPLES {
        let t = cfg.horizon * s as f64 / DERIVATIVE_SAMPLES as f64;
        let x = mu.point(s % mu.len())[0] * 1.5;
        let check = fd_check_derivatives(&cfg.model, t, &[x], &mu, DERIVATIVE_TOLERANCE)?;
        rows.push((t, x, check));
    }
    out.create(&file_name(cfg, cfg.model.name(), cfg.base_seed), |w| {
        writeln!(w, "t,x,max_dev_measure,max_dev_spatial").and_then(|_| {
            for (t, x, c) in &rows {
                writeln!(w, "{t},{x},{},{}", c.max_dev_measure, c.max_dev_spatial)?;
            }
            Ok(())
        })
        .map_err(|source| RunError::Io {
            path: PathBuf::from("verify-derivatives"),
            source,
        })
    })?;
    let worst = rows.iter().map(|(_, _, c)| c.max_deviation()).fold(0.0, f64::max);
    Ok(vec![Criterion::new(
        "verify_derivatives",
        rows.iter().all(|(_, _, c)| c.passed),
        format!("max |analytic - FD| = {worst:.3e} over {DERIVATIVE_SAMPLES} samples (need <= {DERIVATIVE_TOLERANCE})"),
    )])
}

pub fn summary_path(dir: &Path) -> PathBuf {
    dir.join("summary.txt")
}
