//! End-to-end tests of the `r2diff` binary: exit codes, reproducible
//! artifacts, and agreement between CLI output and direct library calls.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use r2diff_bench::formats;
use r2diff_core::DistanceWeights;

fn r2diff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_r2diff"))
        .args(args)
        .output()
        .expect("binary launches")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Small reach dataset most tests below share.
fn gen_dataset(dir: &Path) -> PathBuf {
    let out = dir.join("ds.r2df");
    let st = r2diff(&[
        "gen",
        "--family",
        "reach",
        "--j-train",
        "16",
        "--episodes",
        "4",
        "--t-len",
        "12",
        "--grid",
        "16x16x8",
        "--seed",
        "21",
        "--out",
        &out.to_string_lossy(),
    ]);
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    out
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = r2diff(&["gen", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn missing_file_is_runtime_error_naming_the_file() {
    let out = r2diff(&["inspect", "--file", "/nonexistent/artifact.r2df"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("artifact.r2df"),
        "stderr should name the missing file: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn gen_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    std::fs::create_dir_all(&a).unwrap();
    std::fs::create_dir_all(&b).unwrap();
    let pa = gen_dataset(&a);
    let pb = gen_dataset(&b);
    assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
}

#[test]
fn tune_output_matches_library_call() {
    let dir = tempfile::tempdir().unwrap();
    let ds_path = gen_dataset(dir.path());
    let sched_path = dir.path().join("tuned.sched");
    let out = r2diff(&[
        "tune",
        "--dataset",
        &ds_path.to_string_lossy(),
        "--rank",
        "1",
        "--n-steps",
        "40",
        "--out",
        &sched_path.to_string_lossy(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let ds = formats::read_dataset(&ds_path).unwrap();
    let w = DistanceWeights::default();
    let (schedule, result) = r2diff_core::tune(&ds, 1, 1e-4, 40, &w).unwrap();

    let text = stdout(&out);
    assert!(
        text.contains(&format!("{:.12}", result.target_alpha_bar_n)),
        "stdout should print the tuned alpha_bar_N: {text}"
    );
    assert!(
        text.contains(&format!("{:.12e}", result.gamma)),
        "stdout should print gamma: {text}"
    );

    // the exported schedule round-trips to the library-tuned one
    let loaded = formats::read_schedule(&sched_path).unwrap();
    assert_eq!(loaded.betas(), schedule.betas());
}

#[test]
fn sweep_emits_the_config_condition_grid() {
    let dir = tempfile::tempdir().unwrap();
    let ds_path = gen_dataset(dir.path());
    let sched_path = dir.path().join("tuned.sched");
    let model_path = dir.path().join("m.r2dm");
    assert!(r2diff(&[
        "tune",
        "--dataset",
        &ds_path.to_string_lossy(),
        "--n-steps",
        "30",
        "--out",
        &sched_path.to_string_lossy(),
    ])
    .status
    .success());
    assert!(r2diff(&[
        "train",
        "--dataset",
        &ds_path.to_string_lossy(),
        "--schedule",
        &sched_path.to_string_lossy(),
        "--steps",
        "40",
        "--batch",
        "4",
        "--seed",
        "2",
        "--hidden",
        "8",
        "--blocks",
        "1",
        "--heads",
        "2",
        "--temb",
        "8",
        "--mlp-hidden",
        "16",
        "--out",
        &model_path.to_string_lossy(),
    ])
    .status
    .success());

    let cfg = r#"
[experiment]
name = "grid"
episodes = 4
infer_seed = 7

[[family]]
name = "reach"
dataset = "ds.r2df"
[family.schedules]
tuned = "tuned.sched"
[family.models]
tuned = "m.r2dm"

[[condition]]
id = "ret-mid"
mode = "ret-ste"
schedule = "tuned"
n_start = 15

[[condition]]
id = "raw"
mode = "ret-cheat"
schedule = "tuned"
n_start = 0
"#;
    let cfg_path = dir.path().join("cfg.toml");
    std::fs::write(&cfg_path, cfg).unwrap();
    let out_dir = dir.path().join("out");
    let out = r2diff(&[
        "sweep",
        "--config",
        &cfg_path.to_string_lossy(),
        "--out-dir",
        &out_dir.to_string_lossy(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let csv = std::fs::read_to_string(out_dir.join("report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "condition_id,mode,schedule,rank,n_start,N,family,success_rate,mean_final_err,episodes"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2, "one row per (condition, family): {csv}");
    assert!(rows[0].starts_with("ret-mid,ret-ste,tuned,1,15,30,reach,"));
    assert!(rows[1].starts_with("raw,ret-cheat,tuned,1,0,30,reach,"));
    assert!(rows.iter().all(|r| r.ends_with(",4")), "denominator 4: {csv}");

    // retrieval trace and charts come with the report
    let trace =
        std::fs::read_to_string(out_dir.join("retrieval_trace_reach.csv")).unwrap();
    assert!(trace.starts_with("query_id,method,retrieved_id,score"));
    assert!(out_dir.join("summary.txt").exists());
    assert!(out_dir.join("success.svg").exists());
}

#[test]
fn inspect_reads_every_artifact_kind() {
    let dir = tempfile::tempdir().unwrap();
    let ds_path = gen_dataset(dir.path());
    let sched_path = dir.path().join("s.sched");
    assert!(r2diff(&[
        "basic-schedule",
        "--n-steps",
        "25",
        "--out",
        &sched_path.to_string_lossy(),
    ])
    .status
    .success());
    let model_path = dir.path().join("m.r2dm");
    assert!(r2diff(&[
        "train",
        "--dataset",
        &ds_path.to_string_lossy(),
        "--schedule",
        &sched_path.to_string_lossy(),
        "--steps",
        "5",
        "--batch",
        "2",
        "--seed",
        "0",
        "--hidden",
        "8",
        "--blocks",
        "1",
        "--heads",
        "2",
        "--temb",
        "8",
        "--mlp-hidden",
        "16",
        "--out",
        &model_path.to_string_lossy(),
    ])
    .status
    .success());
    for p in [&ds_path, &sched_path, &model_path] {
        let out = r2diff(&["inspect", "--file", &p.to_string_lossy()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(!out.stdout.is_empty());
    }
}
