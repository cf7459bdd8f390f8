//! End-to-end checks of the command-line interface: exit codes, output
//! determinism across thread counts, and the run/report round trip.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_mimosim")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn temp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("mimosim-cli-tests").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("exp.toml");
    std::fs::write(
        &path,
        r#"
[network]
num_cells = 4
num_antennas = 8
users_per_cell = 2
fading_mode = "uncorrelated"

[experiment]
scheme = "mr"
estimators = ["hardening", "model_aided"]
n_scenarios = 3
n_blocks = 15
seed = 5
"#,
    )
    .unwrap();
    path
}

#[test]
fn missing_config_exits_with_code_one() {
    let out = run(&["run", "--config", "/nonexistent/nope.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty(), "error goes to stderr");
}

#[test]
fn usage_error_exits_with_code_one() {
    let out = run(&["run", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn invalid_config_exits_with_code_one() {
    let dir = temp_dir("invalid-config");
    let path = dir.join("bad.toml");
    std::fs::write(&path, "[experiment]\ntheta_factor = 0.25\n").unwrap();
    let out = run(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn same_seed_produces_identical_csv_bytes() {
    let dir = temp_dir("determinism");
    let cfg = write_config(&dir);
    for sub in ["a", "b"] {
        let out_dir = dir.join(sub);
        let out = run(&[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--seed",
            "123",
        ]);
        assert_eq!(out.status.code(), Some(0), "{out:?}");
    }
    let a = std::fs::read(dir.join("a/results.csv")).unwrap();
    let b = std::fs::read(dir.join("b/results.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn thread_count_does_not_change_output() {
    let dir = temp_dir("threads");
    let cfg = write_config(&dir);
    for (sub, threads) in [("t1", "1"), ("t4", "4")] {
        let out_dir = dir.join(sub);
        let out = run(&[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--threads",
            threads,
        ]);
        assert_eq!(out.status.code(), Some(0), "{out:?}");
    }
    let a = std::fs::read(dir.join("t1/results.csv")).unwrap();
    let b = std::fs::read(dir.join("t4/results.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn run_then_report_round_trips() {
    let dir = temp_dir("report");
    let cfg = write_config(&dir);
    let out_dir = dir.join("out");
    let out = run(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let results = out_dir.join("results.csv");
    let report = run(&["report", "--results", results.to_str().unwrap()]);
    assert_eq!(report.status.code(), Some(0));
    let text = String::from_utf8(report.stdout).unwrap();
    assert!(text.contains("NMSE percentiles"));
    assert!(text.contains("hardening"));
    assert!(text.contains("model_aided"));
    assert!(text.contains("perfect_csi"));

    // the reported medians must equal percentiles recomputed from the CSV
    let records = mimosim::experiment::read_csv(&results).unwrap();
    let cdf = mimosim::experiment::cdf_of(
        &records,
        "hardening",
        mimosim::experiment::Metric::SeBits,
    )
    .unwrap();
    let median = format!("{:.4e}", cdf.median());
    assert!(
        text.contains(&median),
        "report output should contain the recomputed median {median}"
    );
}

#[test]
fn gen_data_train_eval_chain_works() {
    let dir = temp_dir("ml-chain");
    let cfg_path = dir.join("data.toml");
    std::fs::write(
        &cfg_path,
        r#"
[network]
num_cells = 1
num_antennas = 8
users_per_cell = 2
fading_mode = "uncorrelated"

[dataset]
n_large_scale = 6
n_small_scale = 20
scheme = "mr"
seed = 2
"#,
    )
    .unwrap();
    let data = dir.join("data.csv");
    let out = run(&[
        "gen-data",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{out:?}");

    let model = dir.join("model.bin");
    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
        "--epochs",
        "5",
    ]);
    assert_eq!(out.status.code(), Some(0), "{out:?}");

    let out = run(&[
        "eval-model",
        "--model",
        model.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("model test MAE"));
    assert!(text.contains("hardening-mean MAE"));
}

#[test]
fn corrupt_model_exits_with_code_one() {
    let dir = temp_dir("corrupt-model");
    let model = dir.join("model.bin");
    std::fs::write(&model, b"not a model").unwrap();
    let data = dir.join("data.csv");
    std::fs::write(
        &data,
        "xi_loo,t_const,eta_rho_beta,alpha,hardening_mean,eta\n1,1,1,1,1,0.5\n",
    )
    .unwrap();
    let out = run(&[
        "eval-model",
        "--model",
        model.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}
