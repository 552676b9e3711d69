use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use wmvda_cli::config::parse_config_str;
use wmvda_cli::RunManifest;

fn wmvda(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wmvda"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("WMVDA_SEED")
        .env_remove("WMVDA_OUT")
        .output()
        .expect("binary runs")
}

const SMALL_LINEAR: &str = r#"
ensemble_size = 3

[system]
kind = "linear"
steps = 30
"#;

#[test]
fn minimal_linear_defaults() {
    let cfg = parse_config_str("[system]\nkind = \"linear\"\n").unwrap();
    assert_eq!(cfg.grid.points, 50);
    assert_eq!(cfg.ensemble_size, 50);
    assert_eq!(cfg.lambdas(), vec![5.0]);
    assert_eq!(cfg.scheme.interval, 3);
}

#[test]
fn lorenz_climatological_defaults() {
    let cfg = parse_config_str(
        "[system]\nkind = \"lorenz63\"\n[reference]\nmode = \"climatological\"\n",
    )
    .unwrap();
    assert_eq!(cfg.lambdas(), vec![0.02, 0.08, 0.07]);
    assert_eq!(cfg.system.x0, vec![3.0, -3.0, 12.0]);

    let cfg = parse_config_str("[system]\nkind = \"lorenz63\"\n[scheme]\nlambda = [1.0, 2.0, 3.0]\n")
        .unwrap();
    assert_eq!(cfg.lambdas(), vec![1.0, 2.0, 3.0]);
}

#[test]
fn schema_errors_name_the_key() {
    let err = parse_config_str("[scheme]\nlambda = -1.0\n").unwrap_err().to_string();
    assert!(err.contains("scheme.lambda"), "{err}");
    let err = parse_config_str("[system]\nstepz = 10\n").unwrap_err().to_string();
    assert!(err.contains("stepz"), "{err}");
    let err = parse_config_str("[sweep]\nlambdas = [1.0, -2.0]\n").unwrap_err().to_string();
    assert!(err.contains("sweep.lambdas"), "{err}");
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[scheme]\nlambda = -3.0\n").unwrap();
    let out = wmvda(&["run", "--config", cfg.to_str().unwrap()], &dir.path().join("o"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("scheme.lambda"));

    let missing = wmvda(&["run", "--config", "/nonexistent.toml"], &dir.path().join("o"));
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn unknown_command_prints_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = wmvda(&["assimilate-everything"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn run_is_reproducible_from_its_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, SMALL_LINEAR).unwrap();
    let first = dir.path().join("first");
    let out = wmvda(&["run", "--config", cfg.to_str().unwrap(), "--seed", "11"], &first);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let header = fs::read_to_string(first.join("cycles.csv")).unwrap();
    assert_eq!(
        header.lines().next().unwrap(),
        "member,cycle,dim,scheme,x_truth,x_b,y,x_a,bias_running,ubrmse_running"
    );
    // 3 members, 10 analyses each, two schemes
    assert_eq!(header.lines().count(), 1 + 3 * 10 * 2);

    let manifest: RunManifest =
        serde_json::from_str(&fs::read_to_string(first.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.seed, 11);
    assert!(manifest.wall_time_seconds.is_some());

    let second = dir.path().join("second");
    let out = wmvda(&["run", "--manifest", first.join("manifest.json").to_str().unwrap()], &second);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for file in ["cycles.csv", "metrics.csv", "summary.json"] {
        assert_eq!(
            fs::read(first.join(file)).unwrap(),
            fs::read(second.join(file)).unwrap(),
            "{file} differs"
        );
    }

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(first.join("summary.json")).unwrap()).unwrap();
    for key in ["command", "seed", "config", "records", "reductions_vs_3dvar"] {
        assert!(summary.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn seed_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, SMALL_LINEAR).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_wmvda"))
        .args(["run", "--scheme", "3dvar", "--config", cfg.to_str().unwrap()])
        .env("WMVDA_SEED", "99")
        .env("WMVDA_OUT", dir.path().join("env"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: RunManifest = serde_json::from_str(
        &fs::read_to_string(dir.path().join("env").join("manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest.seed, 99);
}

#[test]
fn sweeps_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(
        &cfg,
        format!("{SMALL_LINEAR}\n[sweep]\nlambdas = [0.5, 5.0]\nintervals = [2, 5]\n"),
    )
    .unwrap();
    let out_dir = dir.path().join("sweeps");
    let out = wmvda(&["sweep-lambda", "--config", cfg.to_str().unwrap()], &out_dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(out_dir.join("lambda_sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.starts_with("lambda,dim,bias,abs_bias,ubrmse,mse,first_cycle_w2,failures"));

    let out = wmvda(&["sweep-interval", "--config", cfg.to_str().unwrap()], &out_dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(out_dir.join("interval_sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
}

#[test]
fn cdf_baseline_requires_climatology() {
    let dir = tempfile::tempdir().unwrap();
    let out = wmvda(&["baseline-cdf", "--preset", "lorenz-setup1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = wmvda(&["verify"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS ot_vertex_enumeration"));
    assert!(!stdout.contains("FAIL"));
    assert!(dir.path().join("verify.json").exists());
}
