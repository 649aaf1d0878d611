//! Synthetic orchard scenes with known ground truth.
//!
//! Fruits sit on parallel rows along the world X axis, rows are spaced along
//! Y, and Z points up. A pinhole camera flies along X at constant height and
//! velocity, tilted sideways toward the rows. Detections are the projected
//! fruit centers, optionally corrupted.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Point2, Point3, Rotation3, UnitQuaternion, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::{FruitEstimate, NodeId};
use crate::geometry::{project, CameraSet, GeometryError, HomogeneousPoint3};
use crate::io::{
    cameras_to_txt, detections_to_csv, images_to_txt, read_text, write_text, CameraModel,
    Detection, FrameDetections, FramePose, IoError, PoseSet, SfmCamera,
};

/// Minimum 3-D distance between generated fruits, in meters.
pub const MIN_FRUIT_SEPARATION: f64 = 0.3;
/// Projections closer than this merge into a single detection, in pixels.
pub const MERGE_RADIUS: f64 = 1.0;

const CANOPY_HEIGHT: (f64, f64) = (1.0, 3.0);
const LATERAL_JITTER: f64 = 0.4;
const OCCLUSION_DEPTH_GAP: f64 = 0.6;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Self {
            width: 3840,
            height: 2160,
            focal: 3000.0,
            cx: 1920.0,
            cy: 1080.0,
        }
    }
}

impl Intrinsics {
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.focal, 0.0, self.cx, 0.0, self.focal, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn contains(&self, p: &Point2<f64>) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x < self.width as f64 && p.y < self.height as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    /// Standard deviation of Gaussian centroid noise, pixels.
    pub pixel_noise_sigma: f64,
    pub dropout_prob: f64,
    /// Mean number of spurious detections per frame.
    pub outlier_per_frame_rate: f64,
    pub occlusion_pairs: usize,
    pub rng_seed: u64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            pixel_noise_sigma: 0.0,
            dropout_prob: 0.0,
            outlier_per_frame_rate: 0.0,
            occlusion_pairs: 0,
            rng_seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub rows: usize,
    pub fruits_per_row: usize,
    /// Distance between row lines, meters.
    pub row_spacing: f64,
    /// Along-row length allotted to each fruit, meters.
    pub fruit_spacing: f64,
    pub frame_count: usize,
    pub flight_height: f64,
    /// Sideways tilt of the optical axis away from nadir, degrees.
    pub camera_tilt_deg: f64,
    pub intrinsics: Intrinsics,
    pub corruption: CorruptionConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            rows: 4,
            fruits_per_row: 25,
            row_spacing: 3.0,
            fruit_spacing: 1.0,
            frame_count: 60,
            flight_height: 12.0,
            camera_tilt_deg: 30.0,
            intrinsics: Intrinsics::default(),
            corruption: CorruptionConfig::default(),
        }
    }
}

impl SceneConfig {
    fn validate(&self) -> Result<(), SynthError> {
        let fail = |m: &str| Err(SynthError::InvalidConfig(m.to_owned()));
        if self.rows < 1 || self.fruits_per_row < 1 || self.frame_count < 1 {
            return fail("rows, fruits_per_row and frame_count must be at least 1");
        }
        let positive = [self.row_spacing, self.fruit_spacing, self.intrinsics.focal];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return fail("spacings and focal length must be positive");
        }
        if !(self.flight_height.is_finite() && self.flight_height > CANOPY_HEIGHT.1) {
            return fail("flight height must clear the canopy");
        }
        if !(self.camera_tilt_deg.is_finite() && (0.0..80.0).contains(&self.camera_tilt_deg)) {
            return fail("camera tilt must lie in [0, 80) degrees");
        }
        if self.intrinsics.width == 0 || self.intrinsics.height == 0 {
            return fail("image dimensions must be positive");
        }
        let c = &self.corruption;
        if !(c.pixel_noise_sigma.is_finite() && c.pixel_noise_sigma >= 0.0) {
            return fail("pixel_noise_sigma must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&c.dropout_prob) {
            return fail("dropout_prob must lie in [0, 1]");
        }
        if !(c.outlier_per_frame_rate.is_finite() && c.outlier_per_frame_rate >= 0.0) {
            return fail("outlier_per_frame_rate must be finite and non-negative");
        }
        if 2 * c.occlusion_pairs > self.rows * self.fruits_per_row {
            return fail("not enough fruits for the requested occlusion pairs");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fruit {
    pub position: Point3<f64>,
    pub row: usize,
}

/// Two fruits on one viewing ray: in `frame_id` only the front one is
/// detected, at `shared` (when that detection survived corruption).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionFixture {
    pub front: usize,
    pub back: usize,
    pub frame_id: u32,
    pub shared: Option<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub config: SceneConfig,
    pub fruits: Vec<Fruit>,
    pub poses: PoseSet,
    pub cameras: CameraSet,
    pub detections: FrameDetections,
    /// Source fruit of every detection; `None` marks injected outliers.
    pub ground_truth: BTreeMap<NodeId, Option<usize>>,
    /// Frames in which each fruit projects inside the image.
    pub visibility: Vec<usize>,
    pub occlusions: Vec<OcclusionFixture>,
}

/// World-to-camera pose `(R, t)` of a camera at `eye` looking at `target`,
/// with image "down" as close to `down` as possible.
pub fn look_at_pose(
    eye: &Point3<f64>,
    target: &Point3<f64>,
    down: &Vector3<f64>,
) -> (Matrix3<f64>, Vector3<f64>) {
    let z = (target - eye).normalize();
    let y = (down - z * down.dot(&z)).normalize();
    let x = y.cross(&z);
    let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    let t = -(r * eye.coords);
    (r, t)
}

fn camera_poses(config: &SceneConfig) -> PoseSet {
    let theta = config.camera_tilt_deg.to_radians();
    let canopy_mid = 0.5 * (CANOPY_HEIGHT.0 + CANOPY_HEIGHT.1);
    let depth = config.flight_height - canopy_mid;
    let rows_mid = 0.5 * (config.rows - 1) as f64 * config.row_spacing;
    let y_cam = rows_mid - depth * theta.tan();

    // Along-track half footprint at the slant range of the rows; the path
    // starts and ends one footprint beyond the row ends.
    let slant = depth / theta.cos();
    let margin = slant * config.intrinsics.cy / config.intrinsics.focal;
    let row_length = config.fruits_per_row as f64 * config.fruit_spacing;
    let (x0, x1) = (-margin, row_length + margin);

    let forward = Vector3::new(0.0, theta.sin(), -theta.cos());
    let down = -Vector3::x();
    let model = CameraModel::Pinhole {
        fx: config.intrinsics.focal,
        fy: config.intrinsics.focal,
        cx: config.intrinsics.cx,
        cy: config.intrinsics.cy,
    };
    let mut poses = PoseSet::default();
    poses.cameras.insert(
        1,
        SfmCamera {
            camera_id: 1,
            model,
            width: config.intrinsics.width,
            height: config.intrinsics.height,
        },
    );
    for f in 0..config.frame_count {
        let s = if config.frame_count > 1 {
            f as f64 / (config.frame_count - 1) as f64
        } else {
            0.5
        };
        let eye = Point3::new(x0 + s * (x1 - x0), y_cam, config.flight_height);
        let (r, t) = look_at_pose(&eye, &(eye + forward), &down);
        let frame_id = f as u32 + 1;
        poses.frames.insert(
            frame_id,
            FramePose {
                image_id: frame_id,
                frame_id,
                name: format!("frame_{frame_id:06}.png"),
                camera_id: 1,
                rotation: UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r)),
                translation: t,
            },
        );
    }
    poses
}

fn place_fruits<R: Rng>(config: &SceneConfig, rng: &mut R) -> Vec<Fruit> {
    let mut fruits: Vec<Fruit> = Vec::with_capacity(config.rows * config.fruits_per_row);
    for row in 0..config.rows {
        for i in 0..config.fruits_per_row {
            let mut candidate = Point3::origin();
            for _ in 0..1000 {
                candidate = Point3::new(
                    (i as f64 + rng.random::<f64>()) * config.fruit_spacing,
                    row as f64 * config.row_spacing + rng.random_range(-LATERAL_JITTER..=LATERAL_JITTER),
                    rng.random_range(CANOPY_HEIGHT.0..=CANOPY_HEIGHT.1),
                );
                if fruits
                    .iter()
                    .all(|f| (f.position - candidate).norm() >= MIN_FRUIT_SEPARATION)
                {
                    break;
                }
            }
            fruits.push(Fruit {
                position: candidate,
                row,
            });
        }
    }
    fruits
}

fn pixel(cameras: &CameraSet, frame_id: u32, p: &Point3<f64>) -> Option<(Point2<f64>, f64)> {
    let cam = cameras.get(frame_id).ok()?;
    let hp = HomogeneousPoint3::from_euclidean(p);
    let depth = (cam.projection() * hp.coords()).z;
    if depth <= 0.0 {
        return None;
    }
    project(cam, &hp).ok()?.to_pixel().map(|px| (px, depth))
}

/// Generates a scene; identical configurations give identical scenes.
pub fn generate_scene(config: &SceneConfig) -> Result<SyntheticScene, SynthError> {
    config.validate()?;
    let corruption = &config.corruption;
    let mut rng = ChaCha8Rng::seed_from_u64(corruption.rng_seed);
    let poses = camera_poses(config);
    let cameras = poses.to_camera_set()?;
    let frame_ids: Vec<u32> = cameras.frame_ids().collect();
    let intr = &config.intrinsics;

    let mut fruits = place_fruits(config, &mut rng);

    let visible_frames = |p: &Point3<f64>| -> Vec<u32> {
        frame_ids
            .iter()
            .copied()
            .filter(|&f| pixel(&cameras, f, p).is_some_and(|(px, _)| intr.contains(&px)))
            .collect()
    };

    // Occlusion fixtures: move a second fruit onto the viewing ray of the
    // first, behind it, in the middle frame of the first fruit's visibility.
    let mut occlusions = Vec::new();
    let mut order: Vec<usize> = (0..fruits.len()).collect();
    order.shuffle(&mut rng);
    let mut used = vec![false; fruits.len()];
    let mut cursor = order.into_iter();
    while occlusions.len() < corruption.occlusion_pairs {
        let Some(front) = cursor.by_ref().find(|&i| !used[i]) else {
            return Err(SynthError::InvalidConfig("cannot place occlusion pairs".into()));
        };
        let frames = visible_frames(&fruits[front].position);
        if frames.len() < 5 {
            continue;
        }
        let frame_id = frames[frames.len() / 2];
        let eye = cameras.get(frame_id)?.center().to_euclidean().expect("finite camera");
        let ray = (fruits[front].position - eye).normalize();
        let hidden = fruits[front].position + ray * OCCLUSION_DEPTH_GAP;
        let crowded = |j: usize| j != front && (fruits[j].position - hidden).norm() < MIN_FRUIT_SEPARATION;
        let Some(back) = cursor.by_ref().find(|&i| !used[i]) else {
            return Err(SynthError::InvalidConfig("cannot place occlusion pairs".into()));
        };
        if (0..fruits.len()).any(|j| j != back && crowded(j)) {
            continue;
        }
        fruits[back] = Fruit {
            position: hidden,
            row: fruits[front].row,
        };
        let (pa, _) = pixel(&cameras, frame_id, &fruits[front].position).expect("visible");
        let (pb, _) = pixel(&cameras, frame_id, &fruits[back].position).expect("in front of camera");
        assert!((pa - pb).norm() <= MERGE_RADIUS, "occlusion fixture does not cross");
        used[front] = true;
        used[back] = true;
        occlusions.push(OcclusionFixture {
            front,
            back,
            frame_id,
            shared: None,
        });
    }

    let mut visibility = vec![0usize; fruits.len()];
    let noise = Normal::new(0.0, corruption.pixel_noise_sigma.max(f64::MIN_POSITIVE))
        .expect("valid sigma");
    let outliers = (corruption.outlier_per_frame_rate > 0.0)
        .then(|| Poisson::new(corruption.outlier_per_frame_rate).expect("positive rate"));

    let mut detections = FrameDetections::new();
    let mut ground_truth = BTreeMap::new();
    for &frame_id in &frame_ids {
        // Visible projections, nearest first.
        let mut visible: Vec<(usize, Point2<f64>, f64)> = fruits
            .iter()
            .enumerate()
            .filter_map(|(i, f)| pixel(&cameras, frame_id, &f.position).map(|(px, d)| (i, px, d)))
            .filter(|(_, px, _)| intr.contains(px))
            .collect();
        for (i, _, _) in &visible {
            visibility[*i] += 1;
        }
        visible.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)));
        let mut kept: Vec<(usize, Point2<f64>)> = Vec::new();
        for (i, px, _) in visible {
            if kept.iter().all(|(_, q)| (q - px).norm() > MERGE_RADIUS) {
                kept.push((i, px));
            }
        }

        let mut frame: Vec<(Option<usize>, Point2<f64>)> = Vec::new();
        for (i, px) in kept {
            if corruption.dropout_prob > 0.0 && rng.random::<f64>() < corruption.dropout_prob {
                continue;
            }
            let px = if corruption.pixel_noise_sigma > 0.0 {
                Point2::new(px.x + noise.sample(&mut rng), px.y + noise.sample(&mut rng))
            } else {
                px
            };
            if intr.contains(&px) {
                frame.push((Some(i), px));
            }
        }
        if let Some(dist) = &outliers {
            let n = dist.sample(&mut rng) as usize;
            for _ in 0..n {
                let px = Point2::new(
                    rng.random_range(0.0..intr.width as f64),
                    rng.random_range(0.0..intr.height as f64),
                );
                frame.push((None, px));
            }
        }
        frame.shuffle(&mut rng);

        if frame.is_empty() {
            continue;
        }
        let dets = frame
            .iter()
            .enumerate()
            .map(|(m, (src, px))| {
                ground_truth.insert(NodeId::new(frame_id, m as u32), *src);
                Detection {
                    frame_id,
                    detection_index: m as u32,
                    centroid: *px,
                    bbox: None,
                    score: None,
                }
            })
            .collect();
        detections.insert(frame_id, dets);
    }

    for occ in &mut occlusions {
        occ.shared = ground_truth
            .iter()
            .find(|(n, src)| n.frame_id == occ.frame_id && **src == Some(occ.front))
            .map(|(n, _)| *n);
    }

    Ok(SyntheticScene {
        config: config.clone(),
        fruits,
        poses,
        cameras,
        detections,
        ground_truth,
        visibility,
        occlusions,
    })
}

impl SyntheticScene {
    pub fn fruit_positions(&self) -> Vec<Point3<f64>> {
        self.fruits.iter().map(|f| f.position).collect()
    }

    pub fn source_of(&self, node: NodeId) -> Option<usize> {
        self.ground_truth.get(&node).copied().flatten()
    }

    pub fn is_outlier(&self, node: NodeId) -> bool {
        matches!(self.ground_truth.get(&node), Some(None))
    }

    /// Removes the detections selected by `drop` and renumbers the survivors
    /// of each frame in order.
    pub fn remove_detections<F>(&mut self, mut drop: F)
    where
        F: FnMut(NodeId, Option<usize>) -> bool,
    {
        let mut detections = FrameDetections::new();
        let mut truth = BTreeMap::new();
        for (&frame_id, dets) in &self.detections {
            let mut kept = Vec::new();
            for d in dets {
                let old = NodeId::new(frame_id, d.detection_index);
                let src = self.ground_truth[&old];
                if drop(old, src) {
                    continue;
                }
                let new = NodeId::new(frame_id, kept.len() as u32);
                truth.insert(new, src);
                kept.push(Detection {
                    detection_index: new.detection_index,
                    ..d.clone()
                });
            }
            if !kept.is_empty() {
                detections.insert(frame_id, kept);
            }
        }
        self.detections = detections;
        self.ground_truth = truth;
        for occ in &mut self.occlusions {
            occ.shared = self
                .ground_truth
                .iter()
                .find(|(n, src)| n.frame_id == occ.frame_id && **src == Some(occ.front))
                .map(|(n, _)| *n);
        }
    }

    pub fn truth(&self) -> SceneTruth {
        SceneTruth {
            fruits: self
                .fruits
                .iter()
                .enumerate()
                .map(|(id, f)| TruthFruit {
                    id,
                    x: f.position.x,
                    y: f.position.y,
                    z: f.position.z,
                    row: f.row,
                    visible_frames: self.visibility[id],
                })
                .collect(),
            detections: self
                .ground_truth
                .iter()
                .map(|(n, src)| TruthDetection {
                    frame_id: n.frame_id,
                    detection_index: n.detection_index,
                    fruit: *src,
                })
                .collect(),
            occlusions: self.occlusions.clone(),
        }
    }

    /// Writes `cameras.txt`, `images.txt`, `detections.csv` and `truth.json`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<(), SynthError> {
        fs::create_dir_all(dir).map_err(|source| IoError::Io {
            path: dir.to_owned(),
            source,
        })?;
        write_text(&dir.join("cameras.txt"), &cameras_to_txt(&self.poses))?;
        write_text(&dir.join("images.txt"), &images_to_txt(&self.poses))?;
        write_text(&dir.join("detections.csv"), &detections_to_csv(&self.detections))?;
        let truth = serde_json::to_string_pretty(&self.truth()).map_err(IoError::from)?;
        write_text(&dir.join("truth.json"), &(truth + "\n"))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFruit {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub row: usize,
    pub visible_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthDetection {
    pub frame_id: u32,
    pub detection_index: u32,
    /// `None` for injected outliers.
    pub fruit: Option<usize>,
}

/// Contents of `truth.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneTruth {
    pub fruits: Vec<TruthFruit>,
    pub detections: Vec<TruthDetection>,
    pub occlusions: Vec<OcclusionFixture>,
}

impl SceneTruth {
    pub fn read(path: &Path) -> Result<Self, IoError> {
        Ok(serde_json::from_str(&read_text(path)?)?)
    }

    pub fn positions(&self) -> Vec<Point3<f64>> {
        self.fruits.iter().map(|f| Point3::new(f.x, f.y, f.z)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Matched estimates over all estimates; 0 when there are none.
    pub precision: f64,
    /// Matched truth fruits over all truth fruits; 0 when there are none.
    pub recall: f64,
    /// Estimated count minus true count.
    pub count_error: i64,
    /// Root mean square distance over matched pairs; 0 when nothing matched.
    pub localization_rmse: f64,
    pub matched: usize,
}

/// Greedy nearest-pair matching within `match_radius`. Pairs are taken in
/// ascending distance, each estimate and each truth point at most once.
pub fn score_positions(estimates: &[Point3<f64>], truth: &[Point3<f64>], match_radius: f64) -> Metrics {
    let mut pairs = Vec::new();
    for (i, e) in estimates.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            let d = (e - t).norm();
            if d <= match_radius {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut est_used = vec![false; estimates.len()];
    let mut truth_used = vec![false; truth.len()];
    let mut sum_sq = 0.0;
    let mut matched = 0;
    for (d, i, j) in pairs {
        if !est_used[i] && !truth_used[j] {
            est_used[i] = true;
            truth_used[j] = true;
            sum_sq += d * d;
            matched += 1;
        }
    }
    let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    Metrics {
        precision: ratio(matched, estimates.len()),
        recall: ratio(matched, truth.len()),
        count_error: estimates.len() as i64 - truth.len() as i64,
        localization_rmse: if matched == 0 {
            0.0
        } else {
            (sum_sq / matched as f64).sqrt()
        },
        matched,
    }
}

pub fn score_against_truth(estimates: &[FruitEstimate], scene: &SyntheticScene, match_radius: f64) -> Metrics {
    let points: Vec<Point3<f64>> = estimates.iter().map(FruitEstimate::point).collect();
    score_positions(&points, &scene.fruit_positions(), match_radius)
}
