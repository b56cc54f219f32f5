//! Run configuration: file loading, command-line overrides and validation.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use landreg_core::{FlowSettings, GaussianKernel, Integrator, ThermostatParams};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum IntegratorName {
    Rk4,
    Euler,
}

/// Experiment parameters. The noise amplitude is always derived from
/// `beta` and `lambda`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// JSON landmark file.
    pub input: Option<PathBuf>,
    /// Named CSV landmark files, appended after the sets of `input`.
    pub csv_sets: IndexMap<String, PathBuf>,
    /// Inverse temperature.
    pub beta: f64,
    /// Dissipation.
    pub lambda: f64,
    /// Variance of the observation noise on landmarks.
    pub obs_noise_var: f64,
    /// Prior variance of the landmark positions at the midpoint.
    pub prior_pos_var: f64,
    /// Kernel length scale.
    pub ell: f64,
    /// Time step on `[0, 1]`.
    pub h: f64,
    pub integrator: IntegratorName,
    pub seed: u64,
    /// Number of Monte Carlo samples.
    pub samples: usize,
    /// Inverse temperatures swept by `sample-prior`.
    pub betas: Vec<f64>,
    /// Grid lines per side for warped grids.
    pub grid: usize,
    /// Centre the sets and rotate them onto the first-listed set.
    pub align: bool,
    /// Use the two-set objective when averaging exactly two sets.
    pub pairwise: bool,
    /// Shooting tolerance on the endpoint mismatch.
    pub shoot_tol: f64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input: None,
            csv_sets: IndexMap::new(),
            beta: 25.0,
            lambda: 0.1,
            obs_noise_var: 0.01,
            prior_pos_var: 0.01,
            ell: 0.5,
            h: 0.01,
            integrator: IntegratorName::Rk4,
            seed: 0,
            samples: 20,
            betas: vec![10.0, 20.0, 40.0, 80.0],
            grid: 21,
            align: false,
            pairwise: false,
            shoot_tol: 1e-8,
            output_dir: PathBuf::from("landreg-out"),
        }
    }
}

/// Command-line overrides of [`RunConfig`] keys.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Configuration file (TOML or JSON, or a run manifest to replay).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Random seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON landmark file.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// CSV landmark set as NAME=PATH; repeatable.
    #[arg(long = "set", value_name = "NAME=PATH")]
    pub sets: Vec<String>,
    /// Inverse temperature.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Dissipation rate.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Observation noise variance.
    #[arg(long)]
    pub obs_noise_var: Option<f64>,
    /// Prior variance of the midpoint positions.
    #[arg(long)]
    pub prior_pos_var: Option<f64>,
    /// Gaussian kernel length scale.
    #[arg(long)]
    pub ell: Option<f64>,
    /// Time step; must divide [0, 1].
    #[arg(long)]
    pub h: Option<f64>,
    /// Deterministic flow integrator.
    #[arg(long, value_enum)]
    pub integrator: Option<IntegratorName>,
    /// Number of sampled paths per run.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Comma-separated inverse temperatures.
    #[arg(long, value_delimiter = ',')]
    pub betas: Option<Vec<f64>>,
    /// Grid points per side.
    #[arg(long)]
    pub grid: Option<usize>,
    /// Procrustes-align all sets before use.
    #[arg(long)]
    pub align: bool,
    /// Use the two-set objective when averaging exactly two sets.
    #[arg(long)]
    pub pairwise: bool,
    /// Endpoint tolerance of the shooting solver.
    #[arg(long)]
    pub shoot_tol: Option<f64>,
}

/// A configuration file: either plain keys or a manifest of an earlier run.
pub enum ConfigSource {
    Plain(RunConfig),
    Manifest(crate::manifest::Manifest),
}

pub fn load_config_file(path: &Path) -> CliResult<ConfigSource> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
    let bad = |e: String| CliError::input(format!("invalid configuration {}: {e}", path.display()));
    let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    if is_toml {
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| bad(e.to_string()))?;
        resolve_paths(&mut cfg, path.parent());
        return Ok(ConfigSource::Plain(cfg));
    }
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if value.get("manifest_version").is_some() {
        let manifest = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
        return Ok(ConfigSource::Manifest(manifest));
    }
    let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
    resolve_paths(&mut cfg, path.parent());
    Ok(ConfigSource::Plain(cfg))
}

fn resolve_paths(cfg: &mut RunConfig, base: Option<&Path>) {
    let Some(base) = base else { return };
    let fix = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    if let Some(p) = cfg.input.as_mut() {
        fix(p);
    }
    cfg.csv_sets.values_mut().for_each(fix);
}

impl RunConfig {
    pub fn apply(&mut self, o: &Overrides) -> CliResult<()> {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = o.$field.clone() { self.$field = v; })*
            };
        }
        set!(seed, beta, lambda, obs_noise_var, prior_pos_var, ell, h, integrator, samples, betas, grid, shoot_tol);
        if let Some(v) = &o.out {
            self.output_dir = v.clone();
        }
        if let Some(v) = &o.input {
            self.input = Some(v.clone());
        }
        for spec in &o.sets {
            let (name, path) = spec
                .split_once('=')
                .ok_or_else(|| CliError::input(format!("--set expects NAME=PATH, got `{spec}`")))?;
            if name.is_empty() {
                return Err(CliError::input(format!("--set expects a non-empty name, got `{spec}`")));
            }
            self.csv_sets.insert(name.to_string(), PathBuf::from(path));
        }
        self.align |= o.align;
        self.pairwise |= o.pairwise;
        Ok(())
    }

    pub fn validate(&self) -> CliResult<()> {
        let positive = [
            ("beta", self.beta),
            ("obs_noise_var", self.obs_noise_var),
            ("prior_pos_var", self.prior_pos_var),
            ("ell", self.ell),
            ("h", self.h),
            ("shoot_tol", self.shoot_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CliError::input(format!("`{name}` must be positive and finite, got {v}")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(CliError::input(format!("`lambda` must be non-negative, got {}", self.lambda)));
        }
        if let Some(b) = self.betas.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
            return Err(CliError::input(format!("every entry of `betas` must be positive, got {b}")));
        }
        if self.samples == 0 {
            return Err(CliError::input("`samples` must be at least 1"));
        }
        if self.grid < 2 {
            return Err(CliError::input("`grid` must be at least 2"));
        }
        self.flow()?.steps_for(1.0).map_err(|_| CliError::input(format!("`h` = {} does not divide [0, 1]", self.h)))?;
        Ok(())
    }

    pub fn flow(&self) -> CliResult<FlowSettings> {
        let integrator = match self.integrator {
            IntegratorName::Rk4 => Integrator::Rk4,
            IntegratorName::Euler => Integrator::ExplicitEuler,
        };
        Ok(FlowSettings::new(integrator, self.h)?)
    }

    pub fn kernel(&self) -> CliResult<GaussianKernel> {
        Ok(GaussianKernel::new(self.ell)?)
    }

    pub fn thermostat(&self, beta: f64) -> CliResult<ThermostatParams> {
        Ok(ThermostatParams::from_beta_lambda(beta, self.lambda)?)
    }
}
