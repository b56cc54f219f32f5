//! Command-line front end: landmark I/O, alignment, the registration,
//! posterior, prior-sampling, averaging and warping pipelines, and their
//! CSV/SVG reports.

#![allow(clippy::needless_range_loop)]

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod manifest;
pub mod procrustes;
pub mod report;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::commands::Run;
use crate::config::{load_config_file, ConfigSource, Overrides, RunConfig};
use crate::error::{CliError, CliResult};
use crate::manifest::{hash_inputs, sha256_hex, Manifest, MANIFEST_FILE, MANIFEST_VERSION};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "landreg", version, about = "Bayesian landmark registration and averaging")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Register,
    LinearPosterior,
    SamplePrior,
    Average,
    Warp,
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            CommandKind::Register => "register",
            CommandKind::LinearPosterior => "linear-posterior",
            CommandKind::SamplePrior => "sample-prior",
            CommandKind::Average => "average",
            CommandKind::Warp => "warp",
        }
    }

    fn execute(self, run: &mut Run) -> CliResult<()> {
        match self {
            CommandKind::Register => commands::register(run),
            CommandKind::LinearPosterior => commands::linear_posterior(run),
            CommandKind::SamplePrior => commands::sample_prior(run),
            CommandKind::Average => commands::average(run),
            CommandKind::Warp => commands::warp(run),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Noisy registration of the `reference` set onto the `target` set.
    Register(Overrides),
    /// Posterior of the linearised Langevin prior given both sets.
    LinearPosterior(Overrides),
    /// Push-forward of a grid under prior samples for several temperatures.
    SamplePrior(Overrides),
    /// MAP average of all sets with Laplace spreads.
    Average(Overrides),
    /// Exact registration with intermediate shapes and a warped grid.
    Warp(Overrides),
}

impl Command {
    pub fn split(&self) -> (CommandKind, &Overrides) {
        match self {
            Command::Register(o) => (CommandKind::Register, o),
            Command::LinearPosterior(o) => (CommandKind::LinearPosterior, o),
            Command::SamplePrior(o) => (CommandKind::SamplePrior, o),
            Command::Average(o) => (CommandKind::Average, o),
            Command::Warp(o) => (CommandKind::Warp, o),
        }
    }
}

/// Base configuration, overrides applied, and whether a manifest is being
/// replayed.
pub fn resolve_config(kind: CommandKind, o: &Overrides) -> CliResult<RunConfig> {
    let mut cfg = match o.config.as_deref().map(load_config_file).transpose()? {
        None => RunConfig::default(),
        Some(ConfigSource::Plain(cfg)) => cfg,
        Some(ConfigSource::Manifest(m)) => {
            if m.manifest_version != MANIFEST_VERSION {
                return Err(CliError::input(format!("unsupported manifest version {}", m.manifest_version)));
            }
            if m.command != kind.name() {
                return Err(CliError::input(format!("manifest records `{}`, not `{}`", m.command, kind.name())));
            }
            m.verify_inputs()?;
            m.config
        }
    };
    cfg.apply(o)?;
    Ok(cfg)
}

/// Caps the worker pool from `LANDREG_THREADS`.
pub fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("LANDREG_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::input(format!("LANDREG_THREADS must be a positive integer, got `{v}`")))?;
    // A pool that already exists (e.g. a second run in one process) is kept.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn write_outputs(dir: &Path, kind: CommandKind, run: &Run) -> CliResult<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::input(format!("cannot create {}: {e}", dir.display())))?;
    for (name, bytes) in &run.artifacts {
        std::fs::write(dir.join(name), bytes).map_err(|e| CliError::input(format!("cannot write {name}: {e}")))?;
    }
    let manifest = Manifest {
        manifest_version: MANIFEST_VERSION,
        command: kind.name().to_string(),
        version: VERSION.to_string(),
        seed: run.cfg.seed,
        config: run.cfg.clone(),
        inputs: hash_inputs(&run.cfg)?,
        outputs: run.artifacts.iter().map(|(k, v)| (k.clone(), sha256_hex(v))).collect(),
        converged: run.converged,
    };
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, manifest.to_json()).map_err(|e| CliError::input(format!("cannot write manifest: {e}")))?;
    Ok(path)
}

/// Runs one command and writes its artifacts; returns the process exit code.
pub fn run_command(kind: CommandKind, o: &Overrides) -> CliResult<i32> {
    configure_threads()?;
    let cfg = resolve_config(kind, o)?;
    let mut run = Run::new(cfg)?;
    kind.execute(&mut run)?;
    let out = run.cfg.output_dir.clone();
    let manifest = write_outputs(&out, kind, &run)?;
    log::info!("wrote {} artifacts and {}", run.artifacts.len(), manifest.display());
    Ok(if run.converged { 0 } else { 1 })
}

/// Entry point shared by the binary and tests.
pub fn run(cli: Cli) -> i32 {
    let (kind, o) = cli.command.split();
    match run_command(kind, o) {
        Ok(code) => {
            if code != 0 {
                eprintln!("landreg {}: solver did not converge; artifacts written with the flag set", kind.name());
            }
            code
        }
        Err(e) => {
            eprintln!("landreg {}: {e}", kind.name());
            e.exit_code()
        }
    }
}
