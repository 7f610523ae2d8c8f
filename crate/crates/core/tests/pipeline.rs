use std::path::Path;
use std::time::Instant;

use objslam::artifacts::{read_frames, read_ply, write_frames};
use objslam::pipeline::{compare_runs, prepare, run_pipeline, simulate_frames, RunArtifacts, RunConfig};

fn minimal() -> RunConfig {
    RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/minimal.json")).unwrap()
}

#[test]
fn shipped_configs_parse() {
    let default = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json")).unwrap();
    assert_eq!(default, RunConfig::default());
    minimal().validate().unwrap();
}

#[test]
fn minimal_sphere_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for deblur in [false, true] {
        let mut config = minimal();
        if !deblur {
            config.deblur = None;
        }
        config.output_dir = Some(dir.path().join(if deblur { "deblurred" } else { "blurred" }));
        let start = Instant::now();
        let (artifacts, report) = run_pipeline(&config, None).unwrap();
        assert!(start.elapsed().as_secs_f64() < 60.0);
        let RunArtifacts {
            trajectory_csv,
            mesh_ply,
            ground_truth_ply,
            convergence_csv,
            calibration_input_json,
            calibration_json,
            metrics_json,
            run_log,
        } = &artifacts;
        for path in [
            trajectory_csv,
            mesh_ply,
            ground_truth_ply,
            convergence_csv,
            calibration_input_json,
            calibration_json,
            metrics_json,
            run_log,
        ] {
            assert!(path.metadata().unwrap().len() > 0, "{}", path.display());
        }
        let trajectory = std::fs::read_to_string(trajectory_csv).unwrap();
        assert_eq!(trajectory.lines().next(), Some("timestamp,tx,ty,tz,qx,qy,qz,qw"));
        assert_eq!(trajectory.lines().count(), report.keyframe_count + 1);
        assert!(!read_ply(mesh_ply).unwrap().is_empty());
        assert!((report.estimated_scale / report.true_scale - 1.0).abs() < 0.05);
        reports.push(report);
    }
    let table = compare_runs(&reports[0].metrics, &reports[1].metrics).unwrap();
    assert!(table.row("points").unwrap().delta > 0.0);
}

#[test]
fn ingested_deblurred_stream_dominates_blurred_stream() {
    let dir = tempfile::tempdir().unwrap();
    let base = RunConfig {
        seed: 1,
        deblur: None,
        ..RunConfig::default()
    };
    let sim = prepare(&base).unwrap();
    let blurred = simulate_frames(&base, &sim);
    let sharpened = simulate_frames(&RunConfig { deblur: Some(Default::default()), ..base.clone() }, &sim);
    for (a, b) in blurred.iter().zip(&sharpened) {
        assert!(b.blur_level <= a.blur_level);
    }

    let mut metrics = Vec::new();
    for (name, frames) in [("blurred", &blurred), ("sharpened", &sharpened)] {
        let path = dir.path().join(format!("{name}.jsonl"));
        write_frames(&path, frames).unwrap();
        let config = RunConfig {
            output_dir: Some(dir.path().join(name)),
            ..base.clone()
        };
        let (_, report) = run_pipeline(&config, Some(read_frames(&path).unwrap())).unwrap();
        metrics.push(report.metrics);
    }
    let (b, s) = (&metrics[0], &metrics[1]);
    assert!(s.associated_point_count > b.associated_point_count, "{b:?} {s:?}");
    assert!(s.f_score > b.f_score && s.iou > b.iou && s.rmse_sdf < b.rmse_sdf, "{b:?} {s:?}");
}
