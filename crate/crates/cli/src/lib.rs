//! Command-line front end: config loading, experiment dispatch and output
//! files (CSV tables plus JSON summaries) for plotting.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use wmvda::experiment::{
    cdf_baseline_experiment, interval_sweep, lambda_sweep, run_ensemble, ExperimentConfig,
    ExperimentError, ExperimentSetup, MetricsRecord, Reduction, ReferenceMode, Scheme,
};
use wmvda::parallel::{with_jobs, Execution};
use wmvda::verify;

use config::{parse_config, Preset};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error("{failed} of {total} verification checks failed")]
    Verification { failed: usize, total: usize },
    #[error("cannot write {path}: {message}")]
    Output { path: PathBuf, message: String },
}

impl CliError {
    pub(crate) fn from_validation(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(msg) => CliError::Config(msg),
            other => CliError::Config(other.to_string()),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Experiment(ExperimentError::Config(_)) => 2,
            CliError::Experiment(_) => 3,
            CliError::Verification { .. } => 4,
            CliError::Output { .. } => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "wmvda", version, about = "Wasserstein-regularized variational data assimilation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Experiment file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Start from a built-in configuration instead of a file.
    #[arg(long, global = true, value_enum, conflicts_with = "config")]
    pub preset: Option<Preset>,
    /// Re-run the configuration recorded in a previous manifest.json.
    #[arg(long, global = true, conflicts_with_all = ["config", "preset"])]
    pub manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "WMVDA_OUT", default_value = "wmvda-out")]
    pub out: PathBuf,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true, env = "WMVDA_SEED")]
    pub seed: Option<u64>,
    /// Worker threads (default: all available).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Log progress at info level.
    #[arg(long, short, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cycle an ensemble with each scheme and write per-cycle records.
    Run {
        /// Schemes to run (3dvar, wmvda, cdf_match); default 3dvar and wmvda.
        #[arg(long = "scheme", value_parser = parse_scheme)]
        schemes: Vec<Scheme>,
    },
    /// WM-VDA ensembles over the configured sweep.lambdas.
    SweepLambda,
    /// 3D-Var and WM-VDA ensembles over the configured sweep.intervals.
    SweepInterval,
    /// CDF matching next to 3D-Var and WM-VDA with a climatological reference.
    BaselineCdf,
    /// Built-in oracle checks.
    Verify,
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    s.parse()
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Run { .. } => "run",
            Command::SweepLambda => "sweep-lambda",
            Command::SweepInterval => "sweep-interval",
            Command::BaselineCdf => "baseline-cdf",
            Command::Verify => "verify",
        }
    }

    fn default_preset(&self) -> Preset {
        match self {
            Command::BaselineCdf => Preset::LorenzSetup2,
            _ => Preset::Linear,
        }
    }
}

/// Written to the output directory before any results.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub toolkit_version: String,
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub wall_time_seconds: Option<f64>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn output_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Output { path: path.to_path_buf(), message: e.to_string() }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| output_error(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| output_error(path, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| output_error(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| output_error(path, e))?;
    }
    w.flush().map_err(|e| output_error(path, e))
}

/// Resolves the configuration from the manifest, file or preset, then
/// applies the seed override.
pub fn resolve_config(common: &CommonArgs, command: &Command) -> Result<ExperimentConfig, CliError> {
    let mut cfg = if let Some(path) = &common.manifest {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let manifest: RunManifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        manifest.config
    } else if let Some(path) = &common.config {
        parse_config(path)?
    } else {
        common.preset.unwrap_or_else(|| command.default_preset()).config()
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(CliError::from_validation)?;
    Ok(cfg)
}

#[derive(Debug, Serialize)]
struct MetricsRow {
    scheme: Scheme,
    dim: usize,
    bias: f64,
    abs_bias: f64,
    ubrmse: f64,
    mse: f64,
    members: usize,
    failures: usize,
}

fn metrics_rows(record: &MetricsRecord) -> impl Iterator<Item = MetricsRow> + '_ {
    (0..record.dims()).map(move |d| MetricsRow {
        scheme: record.scheme,
        dim: d,
        bias: record.expected[d].bias,
        abs_bias: record.expected_abs_bias[d],
        ubrmse: record.expected[d].ubrmse,
        mse: record.expected[d].mse,
        members: record.members.len(),
        failures: record.failures.len(),
    })
}

#[derive(Debug, Serialize)]
struct RunSummary<'a> {
    command: &'static str,
    seed: u64,
    config: &'a ExperimentConfig,
    records: Vec<&'a MetricsRecord>,
    /// Percent improvement of each scheme over 3D-Var, when 3D-Var ran.
    reductions_vs_3dvar: Vec<(Scheme, Vec<Reduction>)>,
}

fn reductions(records: &[&MetricsRecord]) -> Vec<(Scheme, Vec<Reduction>)> {
    let Some(base) = records.iter().find(|r| r.scheme == Scheme::ThreeDVar) else {
        return Vec::new();
    };
    records
        .iter()
        .filter(|r| r.scheme != Scheme::ThreeDVar)
        .map(|r| (r.scheme, r.reduction_vs(base)))
        .collect()
}

fn print_records(records: &[&MetricsRecord]) {
    for r in records {
        for m in metrics_rows(r) {
            println!(
                "{:<10} dim {}  bias {:+.4}  |bias| {:.4}  ubrmse {:.4}  mse {:.4}",
                r.scheme.label(),
                m.dim,
                m.bias,
                m.abs_bias,
                m.ubrmse,
                m.mse
            );
        }
        if !r.failures.is_empty() {
            println!("{:<10} {} members failed", r.scheme.label(), r.failures.len());
        }
    }
}

fn command_run(cfg: &ExperimentConfig, out: &Path, schemes: &[Scheme]) -> Result<(), CliError> {
    let mut schemes = schemes.to_vec();
    if schemes.is_empty() {
        schemes = vec![Scheme::ThreeDVar, Scheme::WmVda];
    }
    let setup = ExperimentSetup::new(cfg.clone())?;
    let lambda = cfg.lambdas();
    let runs = schemes
        .iter()
        .map(|&s| run_ensemble(&setup, s, &lambda, Execution::Auto))
        .collect::<Result<Vec<_>, _>>()?;
    write_csv(
        &out.join("cycles.csv"),
        runs.iter().flat_map(|r| r.members.iter().flat_map(|m| m.cycles.iter())),
    )?;
    let records: Vec<&MetricsRecord> = runs.iter().map(|r| &r.record).collect();
    write_csv(&out.join("metrics.csv"), records.iter().flat_map(|r| metrics_rows(r)))?;
    write_json(
        &out.join("summary.json"),
        &RunSummary {
            command: "run",
            seed: cfg.seed,
            config: cfg,
            reductions_vs_3dvar: reductions(&records),
            records: records.clone(),
        },
    )?;
    print_records(&records);
    Ok(())
}

#[derive(Debug, Serialize)]
struct LambdaCsvRow {
    lambda: f64,
    dim: usize,
    bias: f64,
    abs_bias: f64,
    ubrmse: f64,
    mse: f64,
    first_cycle_w2: f64,
    failures: usize,
}

fn command_sweep_lambda(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let setup = ExperimentSetup::new(cfg.clone())?;
    let sweep = lambda_sweep(&setup, &cfg.sweep.lambdas, Execution::Auto)?;
    let rows = sweep.rows.iter().flat_map(|r| {
        (0..r.expected.len()).map(move |d| LambdaCsvRow {
            lambda: r.lambda,
            dim: d,
            bias: r.expected[d].bias,
            abs_bias: r.expected_abs_bias[d],
            ubrmse: r.expected[d].ubrmse,
            mse: r.expected[d].mse,
            first_cycle_w2: r.first_cycle_w2.get(d).copied().unwrap_or(f64::NAN),
            failures: r.failures,
        })
    });
    write_csv(&out.join("lambda_sweep.csv"), rows)?;
    write_json(
        &out.join("lambda_sweep.json"),
        &serde_json::json!({ "command": "sweep-lambda", "seed": cfg.seed, "config": cfg, "rows": sweep.rows }),
    )?;
    for r in &sweep.rows {
        println!(
            "lambda {:<8} |bias| {}  ubrmse {}",
            r.lambda,
            join(&r.expected_abs_bias),
            join(&r.expected.iter().map(|m| m.ubrmse).collect::<Vec<_>>())
        );
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct IntervalCsvRow {
    interval: usize,
    scheme: Scheme,
    dim: usize,
    bias: f64,
    abs_bias: f64,
    ubrmse: f64,
    mse: f64,
    failures: usize,
}

fn command_sweep_interval(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let sweep = interval_sweep(
        cfg,
        &cfg.sweep.intervals,
        &[Scheme::ThreeDVar, Scheme::WmVda],
        Execution::Auto,
    )?;
    let rows = sweep.rows.iter().flat_map(|r| {
        (0..r.expected.len()).map(move |d| IntervalCsvRow {
            interval: r.interval,
            scheme: r.scheme,
            dim: d,
            bias: r.expected[d].bias,
            abs_bias: r.expected_abs_bias[d],
            ubrmse: r.expected[d].ubrmse,
            mse: r.expected[d].mse,
            failures: r.failures,
        })
    });
    write_csv(&out.join("interval_sweep.csv"), rows)?;
    write_json(
        &out.join("interval_sweep.json"),
        &serde_json::json!({ "command": "sweep-interval", "seed": cfg.seed, "config": cfg, "rows": sweep.rows }),
    )?;
    for r in &sweep.rows {
        println!(
            "interval {:<3} {:<6} |bias| {}  ubrmse {}",
            r.interval,
            r.scheme.label(),
            join(&r.expected_abs_bias),
            join(&r.expected.iter().map(|m| m.ubrmse).collect::<Vec<_>>())
        );
    }
    Ok(())
}

fn command_baseline_cdf(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    if cfg.reference.mode != ReferenceMode::Climatological {
        return Err(CliError::Config(
            "baseline-cdf needs reference.mode = \"climatological\"".into(),
        ));
    }
    let cmp = cdf_baseline_experiment(cfg, Execution::Auto)?;
    let records = [&cmp.three_d_var.record, &cmp.wm_vda.record, &cmp.cdf_match.record];
    write_csv(&out.join("metrics.csv"), records.iter().flat_map(|r| metrics_rows(r)))?;
    write_json(
        &out.join("baseline_cdf.json"),
        &RunSummary {
            command: "baseline-cdf",
            seed: cfg.seed,
            config: cfg,
            reductions_vs_3dvar: reductions(&records),
            records: records.to_vec(),
        },
    )?;
    print_records(&records);
    for (scheme, red) in reductions(&records) {
        let bias: Vec<f64> = red.iter().map(|r| r.bias).collect();
        let ubrmse: Vec<f64> = red.iter().map(|r| r.ubrmse).collect();
        println!("{:<10} bias reduction % {}  ubrmse reduction % {}", scheme.label(), join(&bias), join(&ubrmse));
    }
    Ok(())
}

fn command_verify(seed: u64, out: &Path) -> Result<(), CliError> {
    let checks = verify::run_all(seed);
    for c in &checks {
        println!("{c}");
    }
    write_json(&out.join("verify.json"), &checks)?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(CliError::Verification { failed, total: checks.len() });
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ")
}

/// Loads the configuration, writes the manifest, runs the command and
/// completes the manifest with the finish time.
pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve_config(&cli.common, &cli.command)?;
    let out = &cli.common.out;
    fs::create_dir_all(out).map_err(|e| output_error(out, e))?;
    let mut manifest = RunManifest {
        toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
        command: cli.command.name().to_string(),
        config_path: cli.common.config.clone().or_else(|| cli.common.manifest.clone()),
        output_dir: out.clone(),
        seed: cfg.seed,
        config: cfg.clone(),
        started_unix: unix_now(),
        finished_unix: None,
        wall_time_seconds: None,
    };
    let manifest_path = out.join("manifest.json");
    write_json(&manifest_path, &manifest)?;
    log::info!("{} with seed {}, writing to {}", manifest.command, cfg.seed, out.display());

    let started = Instant::now();
    let result = with_jobs(cli.common.jobs, || match &cli.command {
        Command::Run { schemes } => command_run(&cfg, out, schemes),
        Command::SweepLambda => command_sweep_lambda(&cfg, out),
        Command::SweepInterval => command_sweep_interval(&cfg, out),
        Command::BaselineCdf => command_baseline_cdf(&cfg, out),
        Command::Verify => command_verify(cfg.seed, out),
    });
    manifest.finished_unix = Some(unix_now());
    manifest.wall_time_seconds = Some(started.elapsed().as_secs_f64());
    write_json(&manifest_path, &manifest)?;
    result
}
