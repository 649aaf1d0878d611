//! Pipeline configuration: built-in defaults, a TOML file, then flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use orchard_core::AssociationParams;
use serde::Deserialize;

/// Keys accepted in a config file. Relative paths resolve against the file's directory.
#[derive(Debug, Default, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub k: Option<usize>,
    pub tau_epipolar: Option<f64>,
    pub tau_geom: Option<f64>,
    pub ransac_iterations: Option<usize>,
    pub min_track_length: Option<usize>,
    pub max_paths_per_node: Option<usize>,
    pub min_inlier_ratio: Option<f64>,
    pub seed: Option<u64>,
    pub rows: Option<usize>,
    pub input: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    pub cameras: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub exclude_rows: Option<Vec<usize>>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut config: FileConfig =
            toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut config.input,
            &mut config.detections,
            &mut config.cameras,
            &mut config.images,
            &mut config.out,
        ] {
            if let Some(p) = p.as_mut() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(config)
    }

    /// Fills every unset key from `other`.
    pub fn or(self, other: FileConfig) -> FileConfig {
        FileConfig {
            k: self.k.or(other.k),
            tau_epipolar: self.tau_epipolar.or(other.tau_epipolar),
            tau_geom: self.tau_geom.or(other.tau_geom),
            ransac_iterations: self.ransac_iterations.or(other.ransac_iterations),
            min_track_length: self.min_track_length.or(other.min_track_length),
            max_paths_per_node: self.max_paths_per_node.or(other.max_paths_per_node),
            min_inlier_ratio: self.min_inlier_ratio.or(other.min_inlier_ratio),
            seed: self.seed.or(other.seed),
            rows: self.rows.or(other.rows),
            input: self.input.or(other.input),
            detections: self.detections.or(other.detections),
            cameras: self.cameras.or(other.cameras),
            images: self.images.or(other.images),
            out: self.out.or(other.out),
            exclude_rows: self.exclude_rows.or(other.exclude_rows),
        }
    }
}

/// Fully resolved settings for `track`.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub params: AssociationParams,
    /// Number of K-means row clusters.
    pub rows: usize,
    pub detections: PathBuf,
    pub cameras: PathBuf,
    pub images: PathBuf,
    pub out: PathBuf,
    pub exclude_rows: Vec<usize>,
}

impl PipelineConfig {
    /// `layered` already holds flags over config values; defaults fill the rest.
    pub fn resolve(layered: FileConfig) -> Result<Self> {
        let d = AssociationParams::default();
        let params = AssociationParams {
            k: layered.k.unwrap_or(d.k),
            tau_epipolar: layered.tau_epipolar.unwrap_or(d.tau_epipolar),
            tau_geom: layered.tau_geom.unwrap_or(d.tau_geom),
            ransac_iterations: layered.ransac_iterations.unwrap_or(d.ransac_iterations),
            min_track_length: layered.min_track_length.unwrap_or(d.min_track_length),
            max_paths_per_node: layered.max_paths_per_node.unwrap_or(d.max_paths_per_node),
            min_inlier_ratio: layered.min_inlier_ratio.unwrap_or(d.min_inlier_ratio),
            rng_seed: layered.seed.unwrap_or(d.rng_seed),
        };
        params.validate()?;

        let Some(rows) = layered.rows else {
            bail!("the number of rows K is required (--rows or `rows` in the config)");
        };
        if rows == 0 {
            bail!("rows must be at least 1");
        }
        let from_input = |name: &str| layered.input.as_ref().map(|dir| dir.join(name));
        let path = |explicit: Option<PathBuf>, name: &str| {
            explicit
                .or_else(|| from_input(name))
                .with_context(|| format!("no path for {name}; pass --input or --{}", name.split('.').next().unwrap()))
        };
        Ok(PipelineConfig {
            params,
            rows,
            detections: path(layered.detections, "detections.csv")?,
            cameras: path(layered.cameras, "cameras.txt")?,
            images: path(layered.images, "images.txt")?,
            out: layered.out.context("no output directory; pass --out")?,
            exclude_rows: layered.exclude_rows.unwrap_or_default(),
        })
    }
}
