use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SCENE_SCALE: f64 = 3.0;

fn dslam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dslam")).args(args).output().expect("spawning dslam")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, frames: usize) {
    let out = dslam(&["synth", "--kind", "loop", "--frames", &frames.to_string(), "--out", path(dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn run(seq: &Path, output: &Path, extra: &[&str]) -> Output {
    let config = seq.join("config.toml");
    let mut args = vec!["run", "--input", path(seq), "--config", path(&config), "--output", path(output), "--assume-undistorted"];
    args.extend_from_slice(extra);
    dslam(&args)
}

fn table_value(table: &str, key: &str) -> f64 {
    table
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|v| v.strip_prefix('\t')))
        .unwrap_or_else(|| panic!("no `{key}` in\n{table}"))
        .parse()
        .unwrap()
}

#[test]
fn synth_run_eval_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let seq = tmp.path().join("seq");
    let res = tmp.path().join("res");
    synth(&seq, 50);
    let out = run(&seq, &res, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["trajectory.txt", "frames.txt", "points.ply", "report.json"] {
        assert!(res.join(f).is_file(), "{f} missing");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(res.join("report.json")).unwrap()).unwrap();
    for stage in ["tracking", "local_pba"] {
        assert!(report[stage]["count"].as_u64().unwrap() > 0, "{stage} timing missing");
    }

    let out = dslam(&[
        "eval",
        "--est",
        path(&res.join("trajectory.txt")),
        "--gt",
        path(&seq.join("groundtruth.txt")),
        "--surface",
        path(&seq.join("surface.ply")),
        "--points",
        path(&res.join("points.ply")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    let ate = table_value(&table, "rms_ate");
    assert!(ate < 0.01 * SCENE_SCALE, "ATE {ate}");
    assert!(table_value(&table, "pse_points") > 0.0);
    assert!(table_value(&table, "pse_p50").is_finite());
}

#[test]
fn malformed_config_exits_with_config_error_and_no_output() {
    let tmp = tempfile::tempdir().unwrap();
    let seq = tmp.path().join("seq");
    synth(&seq, 5);
    fs::write(seq.join("config.toml"), "preset = \"synthetic\"\npba_levels = \"two\"\n").unwrap();
    let res = tmp.path().join("res");
    let out = run(&seq, &res, &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!res.exists());

    fs::write(seq.join("config.toml"), "no_such_key = 3\n").unwrap();
    assert_eq!(run(&seq, &res, &[]).status.code(), Some(1));
    assert!(!res.exists());
}

#[test]
fn missing_input_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dslam(&["run", "--input", path(&tmp.path().join("nothing")), "--output", path(&tmp.path().join("res"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!tmp.path().join("res").exists());
}

#[test]
fn too_short_sequence_is_a_bootstrap_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let seq = tmp.path().join("seq");
    synth(&seq, 2);
    assert_eq!(run(&seq, &tmp.path().join("res"), &[]).status.code(), Some(4));
}

#[test]
fn sequential_runs_are_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let seq = tmp.path().join("seq");
    synth(&seq, 30);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(run(&seq, &a, &[]).status.success());
    assert!(run(&seq, &b, &[]).status.success());
    for f in ["trajectory.txt", "frames.txt", "points.ply"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn two_stream_mode_completes() {
    let tmp = tempfile::tempdir().unwrap();
    let seq = tmp.path().join("seq");
    synth(&seq, 30);
    let res = tmp.path().join("res");
    let out = run(&seq, &res, &["--threads", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = fs::read_to_string(res.join("trajectory.txt")).unwrap().lines().count();
    assert!(lines >= 2);
}
