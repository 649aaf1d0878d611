//! `orchard-track`: count fruit from detections and camera poses.

mod commands;
mod config;
mod plot;
mod tables;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use orchard_core::synth::{CorruptionConfig, SceneConfig};

use crate::config::{FileConfig, PipelineConfig};

const SEED_ENV: &str = "ORCHARD_TRACK_SEED";

#[derive(Debug, Parser)]
#[command(name = "orchard-track", version, about = "Fruit counting from per-frame detections and camera poses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Associate detections, triangulate fruits and assign rows.
    Track(Box<TrackArgs>),
    /// Generate a synthetic scene with ground truth.
    Synth(SynthArgs),
    /// Score an estimated point table against scene ground truth.
    Eval(EvalArgs),
    /// Correlate per-row counts with per-row yields.
    Correlate(CorrelateArgs),
    /// Draw a top-view scatter of estimated fruits colored by row.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
struct TrackArgs {
    /// TOML file with any of the keys below; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding cameras.txt, images.txt and detections.csv.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    detections: Option<PathBuf>,
    #[arg(long)]
    cameras: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of rows K for K-means.
    #[arg(long)]
    rows: Option<usize>,
    /// Frames searched ahead for correspondences [default: 3].
    #[arg(long)]
    k: Option<usize>,
    /// Epipolar distance threshold, pixels [default: 8].
    #[arg(long)]
    tau_epipolar: Option<f64>,
    /// Reprojection inlier threshold, pixels [default: 3].
    #[arg(long)]
    tau_geom: Option<f64>,
    /// RANSAC hypotheses per path [default: 50].
    #[arg(long)]
    ransac_iterations: Option<usize>,
    /// Shortest path considered [default: 3].
    #[arg(long)]
    min_track_length: Option<usize>,
    /// Paths kept per start node [default: 256].
    #[arg(long)]
    max_paths_per_node: Option<usize>,
    /// Reject estimates below this inlier ratio [default: 0].
    #[arg(long)]
    min_inlier_ratio: Option<f64>,
    /// Seed for RANSAC and K-means [default: 42].
    #[arg(long, env = SEED_ENV)]
    seed: Option<u64>,
    /// Rows excluded from the kept-row total, e.g. border rows.
    #[arg(long, value_delimiter = ',')]
    exclude_rows: Option<Vec<usize>>,
    /// Worker threads for graph construction; 0 picks one per core.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

impl TrackArgs {
    fn layer(&self) -> FileConfig {
        FileConfig {
            k: self.k,
            tau_epipolar: self.tau_epipolar,
            tau_geom: self.tau_geom,
            ransac_iterations: self.ransac_iterations,
            min_track_length: self.min_track_length,
            max_paths_per_node: self.max_paths_per_node,
            min_inlier_ratio: self.min_inlier_ratio,
            seed: self.seed,
            rows: self.rows,
            input: self.input.clone(),
            detections: self.detections.clone(),
            cameras: self.cameras.clone(),
            images: self.images.clone(),
            out: self.out.clone(),
            exclude_rows: self.exclude_rows.clone(),
        }
    }
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    rows: usize,
    #[arg(long, default_value_t = 25)]
    fruits_per_row: usize,
    #[arg(long, default_value_t = 60)]
    frames: usize,
    /// Gaussian centroid noise, pixels.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    /// Mean spurious detections per frame.
    #[arg(long, default_value_t = 0.0)]
    outliers: f64,
    #[arg(long, default_value_t = 0)]
    occlusions: usize,
    #[arg(long, default_value_t = 12.0)]
    height: f64,
    #[arg(long, default_value_t = 30.0)]
    tilt: f64,
    #[arg(long, env = SEED_ENV, default_value_t = 42)]
    seed: u64,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// points.csv written by `track`.
    #[arg(long)]
    points: PathBuf,
    /// truth.json written by `synth`.
    #[arg(long)]
    truth: PathBuf,
    /// tracks.csv; enables the injected-outlier check.
    #[arg(long)]
    tracks: Option<PathBuf>,
    /// Match radius, scene units.
    #[arg(long, default_value_t = 0.25)]
    radius: f64,
}

#[derive(Debug, Args)]
struct CorrelateArgs {
    /// `row,count` table, e.g. rows.csv from `track`.
    #[arg(long)]
    counts: PathBuf,
    /// `row,yield` table.
    #[arg(long)]
    yields: PathBuf,
    #[arg(long, value_delimiter = ',')]
    exclude_rows: Vec<usize>,
    /// Reads `exclude_rows` when no flag is given.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PlotArgs {
    #[arg(long)]
    points: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 900.0)]
    width: f64,
    #[arg(long, default_value_t = 600.0)]
    height: f64,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Track(args) => {
            let file = match &args.config {
                Some(p) => FileConfig::load(p)?,
                None => FileConfig::default(),
            };
            let config = PipelineConfig::resolve(args.layer().or(file))?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(args.threads)
                .build()
                .context("cannot start worker threads")?;
            let summary = pool.install(|| commands::track(&config))?;
            print!("{}", summary.report());
        }
        Command::Synth(a) => {
            let config = SceneConfig {
                rows: a.rows,
                fruits_per_row: a.fruits_per_row,
                frame_count: a.frames,
                flight_height: a.height,
                camera_tilt_deg: a.tilt,
                corruption: CorruptionConfig {
                    pixel_noise_sigma: a.noise,
                    dropout_prob: a.dropout,
                    outlier_per_frame_rate: a.outliers,
                    occlusion_pairs: a.occlusions,
                    rng_seed: a.seed,
                },
                ..SceneConfig::default()
            };
            print!("{}", commands::synth(&config, &a.out)?);
        }
        Command::Eval(a) => {
            let e = commands::eval(&a.points, &a.truth, a.tracks.as_deref(), a.radius)?;
            print!("{}", e.report());
        }
        Command::Correlate(a) => {
            let mut exclude = a.exclude_rows;
            if exclude.is_empty() {
                if let Some(p) = &a.config {
                    exclude = FileConfig::load(p)?.exclude_rows.unwrap_or_default();
                }
            }
            let (rows, r) = commands::correlate(&a.counts, &a.yields, &exclude)?;
            let listed: Vec<String> = rows.iter().map(|r| r.to_string()).collect();
            println!("rows: {}", listed.join(" "));
            println!("pearson_r: {r}");
        }
        Command::Plot(a) => commands::plot(&a.points, &a.out, a.width, a.height)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
