//! TOML experiment files. Every key is optional; missing keys come from the
//! preset selected by `system.kind` and `reference.mode`. Unknown keys are
//! rejected.

use std::path::Path;

use serde::Deserialize;
use wmvda::experiment::{ExperimentConfig, NoiseSpec, ReferenceMode, SystemKind};

use crate::CliError;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    ensemble_size: Option<usize>,
    seed: Option<u64>,
    metric_spin_up: Option<f64>,
    system: Option<SystemSection>,
    noise: Option<NoiseSection>,
    reference: Option<ReferenceSection>,
    grid: Option<GridSection>,
    scheme: Option<SchemeSection>,
    sweep: Option<SweepSection>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemSection {
    kind: Option<SystemKind>,
    dt: Option<f64>,
    steps: Option<usize>,
    spin_up: Option<usize>,
    x0: Option<Vec<f64>>,
    transition: Option<f64>,
    sigma: Option<f64>,
    rho: Option<f64>,
    beta: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct NoiseSection {
    model: Option<NoiseSpecSection>,
    observation: Option<NoiseSpecSection>,
    background_variance: Option<f64>,
    observation_variance: Option<f64>,
    initial_variance: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct NoiseSpecSection {
    bias: Option<f64>,
    variance: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReferenceSection {
    mode: Option<ReferenceMode>,
    samples: Option<usize>,
    variance: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridSection {
    points: Option<usize>,
    half_width: Option<f64>,
    padding: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum LambdaValue {
    One(f64),
    Many(Vec<f64>),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemeSection {
    lambda: Option<LambdaValue>,
    interval: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepSection {
    lambdas: Option<Vec<f64>>,
    intervals: Option<Vec<usize>>,
}

/// Built-in starting points, also used when no file is given.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    Linear,
    LorenzSetup1,
    LorenzSetup2,
}

impl Preset {
    pub fn config(self) -> ExperimentConfig {
        match self {
            Preset::Linear => ExperimentConfig::linear(),
            Preset::LorenzSetup1 => ExperimentConfig::lorenz_setup1(),
            Preset::LorenzSetup2 => ExperimentConfig::lorenz_setup2(),
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn merge_noise(slot: &mut NoiseSpec, section: Option<NoiseSpecSection>) {
    if let Some(s) = section {
        set(&mut slot.bias, s.bias);
        set(&mut slot.variance, s.variance);
    }
}

/// Parses TOML text into a validated configuration.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, CliError> {
    let file: FileConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    let system = file.system.unwrap_or_default();
    let reference = file.reference.unwrap_or_default();
    let kind = system.kind.unwrap_or(SystemKind::Linear);
    let mode = reference.mode.unwrap_or(ReferenceMode::PerCycle);
    let mut cfg = match (kind, mode) {
        (SystemKind::Linear, _) => ExperimentConfig::linear(),
        (SystemKind::Lorenz63, ReferenceMode::PerCycle) => ExperimentConfig::lorenz_setup1(),
        (SystemKind::Lorenz63, ReferenceMode::Climatological) => ExperimentConfig::lorenz_setup2(),
    };
    cfg.reference.mode = mode;

    set(&mut cfg.ensemble_size, file.ensemble_size);
    set(&mut cfg.seed, file.seed);
    set(&mut cfg.metric_spin_up, file.metric_spin_up);

    let s = &mut cfg.system;
    set(&mut s.dt, system.dt);
    set(&mut s.steps, system.steps);
    set(&mut s.spin_up, system.spin_up);
    set(&mut s.x0, system.x0);
    set(&mut s.transition, system.transition);
    set(&mut s.sigma, system.sigma);
    set(&mut s.rho, system.rho);
    set(&mut s.beta, system.beta);

    if let Some(n) = file.noise {
        merge_noise(&mut cfg.noise.model, n.model);
        merge_noise(&mut cfg.noise.observation, n.observation);
        set(&mut cfg.noise.background_variance, n.background_variance);
        set(&mut cfg.noise.observation_variance, n.observation_variance);
        set(&mut cfg.noise.initial_variance, n.initial_variance);
    }
    set(&mut cfg.reference.samples, reference.samples);
    set(&mut cfg.reference.variance, reference.variance);
    if let Some(g) = file.grid {
        set(&mut cfg.grid.points, g.points);
        set(&mut cfg.grid.half_width, g.half_width);
        set(&mut cfg.grid.padding, g.padding);
    }
    if let Some(sc) = file.scheme {
        match sc.lambda {
            Some(LambdaValue::One(v)) => cfg.scheme.lambda = vec![v],
            Some(LambdaValue::Many(v)) => cfg.scheme.lambda = v,
            None => {}
        }
        set(&mut cfg.scheme.interval, sc.interval);
    }
    if let Some(sw) = file.sweep {
        set(&mut cfg.sweep.lambdas, sw.lambdas);
        set(&mut cfg.sweep.intervals, sw.intervals);
    }
    cfg.validate().map_err(CliError::from_validation)?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config_str(&text).map_err(|e| match e {
        CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}
