//! `objslam` command-line driver.
//!
//! Every subcommand works on files, so stages can be rerun on saved
//! artifacts: `simulate` exports a frame stream, `run` executes the full
//! pipeline (optionally on an ingested stream), `calibrate` recovers the
//! SLAM-to-world similarity from two board observations, `evaluate` scores
//! two point clouds and `compare` tabulates two metrics reports.

use std::error::Error;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use objslam::artifacts::{read_frames, read_ply, write_file, write_frames};
use objslam::calibration::{calibrate, CalibrationInput};
use objslam::metrics::evaluate_clouds;
use objslam::pipeline::{compare_runs, load_metrics, prepare, run_pipeline, simulate_frames, RunConfig};

#[derive(Parser)]
#[command(name = "objslam", version, about = "Object-level SLAM reconstruction under motion blur")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a flight and export its frame stream as JSON lines.
    Simulate {
        #[command(flatten)]
        common: ConfigArgs,
        /// Output JSON-lines file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline and write its artifacts.
    Run {
        #[command(flatten)]
        common: ConfigArgs,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Frame stream to use instead of simulating one.
        #[arg(long)]
        frames: Option<PathBuf>,
    },
    /// Estimate the SLAM-to-world similarity from a calibration file.
    Calibrate {
        #[arg(long)]
        input: PathBuf,
        /// Write the result here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a predicted point cloud against a ground-truth cloud.
    Evaluate {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Precision/recall distance threshold in meters.
        #[arg(long)]
        tau: f64,
        #[arg(long, default_value_t = 64)]
        iou_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare two metrics reports side by side.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Print JSON instead of a text table.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Disable the deblur operator.
    #[arg(long)]
    no_deblur: bool,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Box<dyn Error>> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if self.no_deblur {
            config.deblur = None;
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        config.validate()?;
        Ok(config)
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String, Box<dyn Error>> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), Box<dyn Error>> {
    match out {
        Some(path) => write_file(path, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<(), Box<dyn Error>> {
    match cli.command {
        Command::Simulate { common, out } => {
            let config = common.load()?;
            let sim = prepare(&config)?;
            let frames = simulate_frames(&config, &sim);
            write_frames(&out, &frames)?;
            eprintln!("wrote {} frames to {}", frames.len(), out.display());
        }
        Command::Run { common, out, frames } => {
            let mut config = common.load()?;
            if let Some(dir) = out {
                config.output_dir = Some(dir);
            }
            let frames = frames.as_deref().map(read_frames).transpose()?;
            let (artifacts, report) = run_pipeline(&config, frames)?;
            let m = &report.metrics;
            println!(
                "points {} precision {:.4} recall {:.4} f_score {:.4} rmse {:.4} iou {:.4}",
                m.associated_point_count, m.precision, m.recall, m.f_score, m.rmse_sdf, m.iou
            );
            println!(
                "keyframes {} lost intervals {} scale {:.4}",
                report.keyframe_count,
                report.tracking_lost_intervals.len(),
                report.estimated_scale
            );
            eprintln!("artifacts in {}", artifacts.metrics_json.parent().unwrap_or(Path::new(".")).display());
        }
        Command::Calibrate { input, out } => {
            let text = std::fs::read_to_string(&input).map_err(|e| format!("{}: {e}", input.display()))?;
            let parsed: CalibrationInput =
                serde_json::from_str(&text).map_err(|e| format!("{}: {e}", input.display()))?;
            let result = calibrate(&parsed)?;
            emit(&to_json(&result)?, out.as_deref())?;
        }
        Command::Evaluate {
            mesh,
            gt,
            tau,
            iou_samples,
            seed,
        } => {
            let predicted = read_ply(&mesh)?;
            let truth = read_ply(&gt)?;
            let report = evaluate_clouds(&predicted, &truth, tau, iou_samples, seed)?;
            print!("{}", to_json(&report)?);
        }
        Command::Compare { a, b, json } => {
            let table = compare_runs(&load_metrics(&a)?, &load_metrics(&b)?)?;
            if json {
                print!("{}", to_json(&table)?);
            } else {
                print!("{}", table.to_text());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
