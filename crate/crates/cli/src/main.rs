use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use dslam::config::Config;
use dslam::eval::{evaluate, GridIndex};
use dslam::io::{self, IoError};
use dslam::synthetic::{generate, SequenceConfig, TrajectoryKind};
use dslam::system::{run, RunMode, SystemError};

#[derive(Parser)]
#[command(name = "dslam", version, about = "Direct sparse monocular SLAM with a persistent map")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline on an ASL sequence directory.
    Run {
        #[arg(long)]
        input: PathBuf,
        /// TOML configuration; `preset = "synthetic"` selects the small-image defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        /// 1 runs tracking and mapping interleaved (deterministic), 2 runs them as two threads.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        threads: u8,
        /// Skip radial-tangential undistortion of the input images.
        #[arg(long)]
        assume_undistorted: bool,
    },
    /// Align an estimated trajectory to ground truth and report ATE (and PSE).
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Reference surface samples (ASCII PLY).
        #[arg(long, requires = "points")]
        surface: Option<PathBuf>,
        /// Reconstructed map points (ASCII PLY).
        #[arg(long, requires = "surface")]
        points: Option<PathBuf>,
    },
    /// Render a synthetic sequence in the ASL layout with ground truth.
    Synth {
        /// line, orbit or loop
        #[arg(long, default_value = "loop")]
        kind: String,
        #[arg(long, default_value_t = 100)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

/// Failure classes, each with its own exit status.
#[derive(Debug)]
enum Failure {
    Config(anyhow::Error),
    Io(anyhow::Error),
    TrackingLost(anyhow::Error),
    Bootstrap(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Io(_) => 2,
            Failure::TrackingLost(_) => 3,
            Failure::Bootstrap(_) => 4,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Io(e) | Failure::TrackingLost(e) | Failure::Bootstrap(e) => e,
        }
    }
}

fn io_failure(e: IoError) -> Failure {
    Failure::Io(e.into())
}

impl From<SystemError> for Failure {
    fn from(e: SystemError) -> Self {
        match e {
            SystemError::TrackingLost { .. } => Failure::TrackingLost(e.into()),
            SystemError::Bootstrap(_) | SystemError::InputEndedDuringBootstrap { .. } => Failure::Bootstrap(e.into()),
            _ => Failure::Io(e.into()),
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<Config, Failure> {
    let Some(path) = path else {
        return Ok(Config::default());
    };
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(Failure::Config)?;
    Config::from_toml(&text)
        .with_context(|| format!("config {}", path.display()))
        .map_err(Failure::Config)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), Failure> {
    fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::Io)
}

fn cmd_run(input: &Path, config: Option<&Path>, output: &Path, threads: u8, assume_undistorted: bool) -> Result<(), Failure> {
    let config = load_config(config)?;
    let source = io::load_sequence(input, assume_undistorted).map_err(io_failure)?;
    log::info!("{} frames from {}", source.len(), input.display());
    let mode = if threads == 2 { RunMode::TwoStreams } else { RunMode::Sequential };
    let frames = source.frames().map(|f| f.map_err(|e| SystemError::Input(e.to_string())));
    let result = run(frames, &source.camera(), &config, mode)?;

    fs::create_dir_all(output)
        .with_context(|| format!("creating {}", output.display()))
        .map_err(Failure::Io)?;
    io::write_trajectory(&output.join("trajectory.txt"), &result.keyframe_trajectory()).map_err(io_failure)?;
    io::write_trajectory(&output.join("frames.txt"), &result.frame_trajectory()).map_err(io_failure)?;
    io::write_pointcloud(&output.join("points.ply"), &result.point_cloud()).map_err(io_failure)?;
    let report = serde_json::to_string_pretty(&result.report).context("serializing report").map_err(Failure::Io)?;
    write_file(&output.join("report.json"), report.as_bytes())?;
    log::info!(
        "{} keyframes, {} live points written to {}",
        result.report.keyframes,
        result.report.live_points,
        output.display()
    );
    Ok(())
}

fn cmd_eval(est: &Path, gt: &Path, surface: Option<&Path>, points: Option<&Path>) -> Result<(), Failure> {
    let est = io::read_trajectory(est).map_err(io_failure)?;
    let gt = io::read_trajectory(gt).map_err(io_failure)?;
    let (points, index) = match (points, surface) {
        (Some(p), Some(s)) => {
            let points = io::read_pointcloud(p).map_err(io_failure)?;
            let index = GridIndex::new(io::read_pointcloud(s).map_err(io_failure)?)
                .context("surface")
                .map_err(Failure::Io)?;
            (Some(points), Some(index))
        }
        _ => (None, None),
    };
    let report = evaluate(&est, &gt, points.as_deref(), index.as_ref())
        .context("evaluation")
        .map_err(Failure::Io)?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_synth(kind: &str, frames: usize, out: &Path, seed: u64) -> Result<(), Failure> {
    let kind: TrajectoryKind = kind.parse().context("--kind").map_err(Failure::Config)?;
    let sequence = generate(&SequenceConfig {
        kind,
        frames,
        seed,
        ..Default::default()
    })
    .context("rendering")
    .map_err(Failure::Config)?;
    io::write_asl(&sequence, out).map_err(io_failure)?;
    write_file(&out.join("config.toml"), b"preset = \"synthetic\"\n")?;
    log::info!("{} frames written to {}", frames, out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            input,
            config,
            output,
            threads,
            assume_undistorted,
        } => cmd_run(input, config.as_deref(), output, *threads, *assume_undistorted),
        Command::Eval { est, gt, surface, points } => cmd_eval(est, gt, surface.as_deref(), points.as_deref()),
        Command::Synth { kind, frames, out, seed } => cmd_synth(kind, *frames, out, *seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error());
            ExitCode::from(failure.code())
        }
    }
}
