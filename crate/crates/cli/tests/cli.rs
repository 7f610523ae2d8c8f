use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_objslam"))
}

fn minimal_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/minimal.json")
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_minimal(out: &Path, extra: &[&str]) -> Output {
    run_ok(
        bin()
            .args(["run", "--config"])
            .arg(minimal_config())
            .arg("--out")
            .arg(out)
            .args(extra),
    )
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_minimal(&a, &[]);
    run_minimal(&b, &[]);
    for name in [
        "metrics.json",
        "trajectory.csv",
        "mesh.ply",
        "gt.ply",
        "convergence.csv",
        "calibration.json",
        "calibration_input.json",
        "run.log",
    ] {
        let (x, y) = (fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
        assert!(!x.is_empty(), "{name} is empty");
        assert_eq!(x, y, "{name} differs between runs");
    }
}

#[test]
fn saved_stages_can_be_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    run_minimal(&run, &[]);

    let cal = run_ok(bin().args(["calibrate", "--input"]).arg(run.join("calibration_input.json")));
    assert_eq!(cal.stdout, fs::read(run.join("calibration.json")).unwrap());

    let eval = run_ok(
        bin()
            .args(["evaluate", "--tau", "0.05", "--mesh"])
            .arg(run.join("gt.ply"))
            .arg("--gt")
            .arg(run.join("gt.ply")),
    );
    let report: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(report["f_score"], 1.0);
    assert_eq!(report["rmse_sdf"], 0.0);

    let cmp = run_ok(
        bin()
            .args(["compare", "--json"])
            .arg(run.join("metrics.json"))
            .arg(run.join("metrics.json")),
    );
    let table: serde_json::Value = serde_json::from_slice(&cmp.stdout).unwrap();
    for row in table["rows"].as_array().unwrap() {
        assert_eq!(row["delta"], 0.0, "{row}");
    }
}

#[test]
fn exported_frames_reproduce_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("frames.jsonl");
    run_ok(
        bin()
            .args(["simulate", "--no-deblur", "--config"])
            .arg(minimal_config())
            .arg("--out")
            .arg(&frames),
    );
    let (sim, ingest) = (dir.path().join("sim"), dir.path().join("ingest"));
    run_minimal(&sim, &["--no-deblur"]);
    run_minimal(&ingest, &["--no-deblur", "--frames", frames.to_str().unwrap()]);
    for name in ["metrics.json", "trajectory.csv"] {
        assert_eq!(fs::read(sim.join(name)).unwrap(), fs::read(ingest.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn non_finite_pose_is_reported_by_line() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("frames.jsonl");
    run_ok(
        bin()
            .args(["simulate", "--config"])
            .arg(minimal_config())
            .arg("--out")
            .arg(&frames),
    );
    let text = fs::read_to_string(&frames).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let t = lines[6].find("\"t\":[").expect("pose translation") + 5;
    lines[6].insert_str(t, "1e999");
    let end = lines[6][t + 5..].find(',').unwrap() + t + 5;
    lines[6].replace_range(t + 5..end, "");
    fs::write(&frames, lines.join("\n")).unwrap();

    let out = bin()
        .args(["run", "--config"])
        .arg(minimal_config())
        .arg("--out")
        .arg(dir.path().join("run"))
        .arg("--frames")
        .arg(&frames)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 7"), "{err}");
}

#[test]
fn late_stage_failure_keeps_earlier_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut config: serde_json::Value = serde_json::from_str(&fs::read_to_string(minimal_config()).unwrap()).unwrap();
    config["metrics"]["iou_samples_per_axis"] = 4.into();
    let path = dir.path().join("config.json");
    fs::write(&path, config.to_string()).unwrap();
    let run = dir.path().join("run");
    let out = bin().arg("run").arg("--config").arg(&path).arg("--out").arg(&run).output().unwrap();
    assert!(!out.status.success());
    for name in ["trajectory.csv", "mesh.ply", "calibration.json"] {
        assert!(!fs::read(run.join(name)).unwrap().is_empty(), "{name}");
    }
    assert!(!run.join("metrics.json").exists());
    let log = fs::read_to_string(run.join("run.log")).unwrap();
    assert!(log.lines().last().unwrap().starts_with("error:"), "{log}");
}

#[test]
fn invalid_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let typo = dir.path().join("typo.json");
    fs::write(&typo, r#"{"sede": 3}"#).unwrap();
    let out = bin().arg("run").arg("--config").arg(&typo).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sede"));

    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let report = serde_json::json!({
        "precision": 0.9, "recall": 0.8, "f_score": 0.847, "rmse_sdf": 0.1, "iou": 0.7,
        "iou_standard_error": 0.0, "associated_point_count": 10, "distance_threshold": 0.05,
        "iou_samples_per_axis": 64, "mesh_resolution": 128
    });
    fs::write(&a, report.to_string()).unwrap();
    let mut other = report.clone();
    other["distance_threshold"] = 0.1.into();
    fs::write(&b, other.to_string()).unwrap();
    let out = bin().arg("compare").arg(&a).arg(&b).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("tau"));
}
