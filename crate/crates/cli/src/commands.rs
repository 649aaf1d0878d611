use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use log::{info, warn};
use orchard_core::io::{
    export_results, parse_detections, parse_points_csv, read_sfm_export, read_text, write_text, IoError,
};
use orchard_core::synth::{generate_scene, score_positions, Metrics, SceneConfig, SceneTruth};
use orchard_core::{fruit_association, kmeans_rows, pearson_correlation, row_counts, NodeId};

use crate::config::PipelineConfig;
use crate::plot::scatter_svg;
use crate::tables::{counts_to_csv, read_counts, read_tracks, read_yields};

#[derive(Debug, Clone, PartialEq)]
pub struct TrackSummary {
    pub total: usize,
    /// Empty when clustering was skipped.
    pub row_counts: Vec<usize>,
    pub exclude_rows: Vec<usize>,
}

impl TrackSummary {
    pub fn report(&self) -> String {
        let mut out = format!("total: {}\n", self.total);
        for (row, c) in self.row_counts.iter().enumerate() {
            let mark = if self.exclude_rows.contains(&row) { " (excluded)" } else { "" };
            out.push_str(&format!("row {row}: {c}{mark}\n"));
        }
        if !self.exclude_rows.is_empty() && !self.row_counts.is_empty() {
            let kept: usize = self
                .row_counts
                .iter()
                .enumerate()
                .filter(|(r, _)| !self.exclude_rows.contains(r))
                .map(|(_, c)| c)
                .sum();
            out.push_str(&format!("total over kept rows: {kept}\n"));
        }
        out
    }
}

pub fn track(config: &PipelineConfig) -> Result<TrackSummary> {
    let poses = read_sfm_export(&config.cameras, &config.images).map_err(|e| match e {
        IoError::Io { path, source } => anyhow!("missing pose file {}: {source}", path.display()),
        other => anyhow!(other).context("cannot load camera poses"),
    })?;
    let detections = parse_detections(&config.detections)?;
    let cameras = poses.to_camera_set()?;
    info!("{} posed frames, {} frames with detections", cameras.len(), detections.len());

    let estimates = fruit_association(&detections, &cameras, &config.params)?;

    let (labels, counts) = if estimates.len() < config.rows {
        warn!(
            "{} estimates cannot form {} rows; row clustering skipped",
            estimates.len(),
            config.rows
        );
        (vec![None; estimates.len()], Vec::new())
    } else {
        let points: Vec<_> = estimates.iter().map(|e| e.point()).collect();
        let clustering = kmeans_rows(&points, config.rows, config.params.rng_seed)?;
        let counts = row_counts(&clustering.assignments);
        (clustering.labels().into_iter().map(Some).collect(), counts)
    };

    export_results(&config.out, &estimates, &labels)?;
    write_text(&config.out.join("rows.csv"), &counts_to_csv(&counts))?;
    Ok(TrackSummary {
        total: estimates.len(),
        row_counts: counts,
        exclude_rows: config.exclude_rows.clone(),
    })
}

pub fn synth(config: &SceneConfig, out: &Path) -> Result<String> {
    let scene = generate_scene(config)?;
    scene.write_to_dir(out)?;
    let outliers = scene.ground_truth.values().filter(|f| f.is_none()).count();
    Ok(format!(
        "fruits: {}\nframes: {}\ndetections: {}\noutliers: {}\n",
        scene.fruits.len(),
        scene.cameras.len(),
        scene.ground_truth.len(),
        outliers
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub estimates: usize,
    pub truth: usize,
    pub metrics: Metrics,
    /// Inlier detections that are injected outliers; `None` without a tracks file.
    pub outlier_inliers: Option<usize>,
}

impl Evaluation {
    pub fn report(&self) -> String {
        let m = &self.metrics;
        let mut out = format!(
            "estimates: {}\ntruth: {}\nmatched: {}\nprecision: {}\nrecall: {}\ncount_error: {}\nrmse: {}\n",
            self.estimates, self.truth, m.matched, m.precision, m.recall, m.count_error, m.localization_rmse
        );
        if let Some(n) = self.outlier_inliers {
            out.push_str(&format!("outlier_inliers: {n}\n"));
        }
        out
    }
}

pub fn eval(points: &Path, truth: &Path, tracks: Option<&Path>, radius: f64) -> Result<Evaluation> {
    if !(radius.is_finite() && radius > 0.0) {
        bail!("match radius must be positive");
    }
    let records = parse_points_csv(&read_text(points)?).with_context(|| format!("in {}", points.display()))?;
    let truth = SceneTruth::read(truth)?;
    let estimated: Vec<_> = records.iter().map(|r| r.position).collect();
    let metrics = score_positions(&estimated, &truth.positions(), radius);

    let outlier_inliers = match tracks {
        None => None,
        Some(path) => {
            let outliers: BTreeSet<NodeId> = truth
                .detections
                .iter()
                .filter(|d| d.fruit.is_none())
                .map(|d| NodeId::new(d.frame_id, d.detection_index))
                .collect();
            let tracks = read_tracks(path)?;
            Some(tracks.values().flatten().filter(|n| outliers.contains(n)).count())
        }
    };
    Ok(Evaluation {
        estimates: records.len(),
        truth: truth.fruits.len(),
        metrics,
        outlier_inliers,
    })
}

/// Pearson r between per-row counts and yields over rows present in both
/// tables and not excluded.
pub fn correlate(counts: &Path, yields: &Path, exclude: &[usize]) -> Result<(Vec<usize>, f64)> {
    let counts = read_counts(counts)?;
    let yields = read_yields(yields)?;
    let keep = |m: &BTreeMap<usize, f64>| -> BTreeSet<usize> { m.keys().copied().filter(|r| !exclude.contains(r)).collect() };
    let (a, b) = (keep(&counts), keep(&yields));
    if a != b {
        let missing: Vec<_> = a.symmetric_difference(&b).collect();
        bail!("rows {missing:?} appear in only one of the tables");
    }
    let rows: Vec<usize> = a.into_iter().collect();
    let c: Vec<f64> = rows.iter().map(|r| counts[r]).collect();
    let y: Vec<f64> = rows.iter().map(|r| yields[r]).collect();
    let r = pearson_correlation(&c, &y)?;
    Ok((rows, r))
}

pub fn plot(points: &Path, out: &Path, width: f64, height: f64) -> Result<()> {
    let records = parse_points_csv(&read_text(points)?).with_context(|| format!("in {}", points.display()))?;
    write_text(out, &scatter_svg(&records, width, height))?;
    Ok(())
}
