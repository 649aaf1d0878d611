//! Detection, pose, and result file formats.
//!
//! Poses follow the text export of common structure-from-motion tools
//! (`cameras.txt` + `images.txt`) with the world-to-camera convention
//! `x_cam = R X_world + t`, so `P = K [R | t]`.
//!
//! All numbers are written with the shortest representation that parses back
//! to the identical `f64`, in plain decimal notation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::{Matrix3, Point2, Point3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::FruitEstimate;
use crate::geometry::{compose_projection, CameraFrame, CameraSet, GeometryError, ProjectionMatrix};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unsupported camera model {model}")]
    UnsupportedCameraModel { line: usize, model: String },
    #[error("line {line}: duplicate pose for frame {frame_id}")]
    DuplicateFrame { line: usize, frame_id: u32 },
    #[error("line {line}: negative pixel coordinate")]
    NegativeCoordinate { line: usize },
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl IoError {
    fn parse(line: usize, message: impl Into<String>) -> Self {
        IoError::Parse {
            line,
            message: message.into(),
        }
    }

    /// 1-based line number of a format error, if any.
    pub fn line(&self) -> Option<usize> {
        match self {
            IoError::Parse { line, .. }
            | IoError::UnsupportedCameraModel { line, .. }
            | IoError::DuplicateFrame { line, .. }
            | IoError::NegativeCoordinate { line } => Some(*line),
            _ => None,
        }
    }
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.to_owned(),
        source,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    fs::write(path, text).map_err(|source| IoError::Io {
        path: path.to_owned(),
        source,
    })
}

/// A fruit centroid reported by the detector in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame_id: u32,
    pub detection_index: u32,
    pub centroid: Point2<f64>,
    /// `(x, y, w, h)` in pixels.
    pub bbox: Option<[f64; 4]>,
    pub score: Option<f64>,
}

/// Detections grouped by frame, frames ascending.
pub type FrameDetections = BTreeMap<u32, Vec<Detection>>;

pub fn detection_count(detections: &FrameDetections) -> usize {
    detections.values().map(Vec::len).sum()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionRecord {
    frame_id: u32,
    x: f64,
    y: f64,
    #[serde(default)]
    bbox: Option<[f64; 4]>,
    #[serde(default)]
    score: Option<f64>,
}

struct Grouper {
    frames: FrameDetections,
}

impl Grouper {
    fn push(
        &mut self,
        line: usize,
        frame_id: u32,
        x: f64,
        y: f64,
        bbox: Option<[f64; 4]>,
        score: Option<f64>,
    ) -> Result<(), IoError> {
        if !(x.is_finite() && y.is_finite()) {
            return Err(IoError::parse(line, "non-finite centroid"));
        }
        if x < 0.0 || y < 0.0 {
            return Err(IoError::NegativeCoordinate { line });
        }
        if let Some(s) = score {
            if !(0.0..=1.0).contains(&s) {
                return Err(IoError::parse(line, "score outside [0, 1]"));
            }
        }
        let frame = self.frames.entry(frame_id).or_default();
        frame.push(Detection {
            frame_id,
            detection_index: frame.len() as u32,
            centroid: Point2::new(x, y),
            bbox,
            score,
        });
        Ok(())
    }
}

/// Parses a detection file, either comma-separated text with a header row
/// (`frame_id,x,y` plus optional `bbox_x,bbox_y,bbox_w,bbox_h` and `score`)
/// or a JSON array of `{frame_id, x, y, bbox?, score?}` objects.
pub fn parse_detections_str(text: &str) -> Result<FrameDetections, IoError> {
    if text.trim_start().starts_with('[') {
        parse_detections_json(text)
    } else {
        parse_detections_csv(text)
    }
}

pub fn parse_detections(path: &Path) -> Result<FrameDetections, IoError> {
    parse_detections_str(&read_text(path)?)
}

fn parse_detections_json(text: &str) -> Result<FrameDetections, IoError> {
    let records: Vec<DetectionRecord> = serde_json::from_str(text)?;
    let mut g = Grouper {
        frames: FrameDetections::new(),
    };
    for (i, r) in records.into_iter().enumerate() {
        // JSON has no meaningful line numbers; report the record position.
        g.push(i + 1, r.frame_id, r.x, r.y, r.bbox, r.score)?;
    }
    Ok(g.frames)
}

const BBOX_COLUMNS: [&str; 4] = ["bbox_x", "bbox_y", "bbox_w", "bbox_h"];

fn parse_detections_csv(text: &str) -> Result<FrameDetections, IoError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (header_line, header) = lines
        .by_ref()
        .find(|(_, l)| !l.trim().is_empty())
        .ok_or_else(|| IoError::parse(1, "missing header row"))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let col = |name: &str| columns.iter().position(|c| *c == name);
    for c in &columns {
        if !matches!(*c, "frame_id" | "x" | "y" | "score") && !BBOX_COLUMNS.contains(c) {
            return Err(IoError::parse(header_line, format!("unknown column '{c}'")));
        }
    }
    let (Some(fc), Some(xc), Some(yc)) = (col("frame_id"), col("x"), col("y")) else {
        return Err(IoError::parse(header_line, "header must contain frame_id, x and y"));
    };
    let bbox_cols: Vec<Option<usize>> = BBOX_COLUMNS.iter().map(|n| col(n)).collect();
    let has_bbox = match bbox_cols.iter().filter(|c| c.is_some()).count() {
        0 => false,
        4 => true,
        _ => return Err(IoError::parse(header_line, "bbox needs all four columns")),
    };
    let score_col = col("score");

    let mut g = Grouper {
        frames: FrameDetections::new(),
    };
    for (line, raw) in lines {
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
        if fields.len() != columns.len() {
            return Err(IoError::parse(
                line,
                format!("expected {} fields, found {}", columns.len(), fields.len()),
            ));
        }
        let num = |i: usize| -> Result<f64, IoError> {
            fields[i]
                .parse::<f64>()
                .map_err(|_| IoError::parse(line, format!("invalid number '{}'", fields[i])))
        };
        let frame_id: u32 = fields[fc]
            .parse()
            .map_err(|_| IoError::parse(line, format!("invalid frame id '{}'", fields[fc])))?;
        let bbox = if has_bbox && bbox_cols.iter().any(|c| !fields[c.unwrap()].is_empty()) {
            let mut b = [0.0; 4];
            for (slot, c) in b.iter_mut().zip(&bbox_cols) {
                *slot = num(c.unwrap())?;
            }
            Some(b)
        } else {
            None
        };
        let score = match score_col {
            Some(c) if !fields[c].is_empty() => Some(num(c)?),
            _ => None,
        };
        g.push(line, frame_id, num(xc)?, num(yc)?, bbox, score)?;
    }
    Ok(g.frames)
}

/// Serializes detections in the comma-separated format read by
/// [`parse_detections_str`]. Detections are written frame by frame in index
/// order, so indices survive a round trip.
pub fn detections_to_csv(detections: &FrameDetections) -> String {
    let all = detections.values().flatten();
    let with_bbox = all.clone().any(|d| d.bbox.is_some());
    let with_score = all.clone().any(|d| d.score.is_some());
    let mut out = String::from("frame_id,x,y");
    if with_bbox {
        out.push_str(",bbox_x,bbox_y,bbox_w,bbox_h");
    }
    if with_score {
        out.push_str(",score");
    }
    out.push('\n');
    for d in all {
        let _ = write!(out, "{},{},{}", d.frame_id, d.centroid.x, d.centroid.y);
        if with_bbox {
            match d.bbox {
                Some([x, y, w, h]) => {
                    let _ = write!(out, ",{x},{y},{w},{h}");
                }
                None => out.push_str(",,,,"),
            }
        }
        if with_score {
            match d.score {
                Some(s) => {
                    let _ = write!(out, ",{s}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// Intrinsic model of one SfM camera.
#[derive(Debug, Clone, PartialEq)]
pub enum CameraModel {
    SimplePinhole { f: f64, cx: f64, cy: f64 },
    Pinhole { fx: f64, fy: f64, cx: f64, cy: f64 },
    /// The radial coefficient is carried through but never applied.
    SimpleRadial { f: f64, cx: f64, cy: f64, k: f64 },
}

impl CameraModel {
    pub fn name(&self) -> &'static str {
        match self {
            CameraModel::SimplePinhole { .. } => "SIMPLE_PINHOLE",
            CameraModel::Pinhole { .. } => "PINHOLE",
            CameraModel::SimpleRadial { .. } => "SIMPLE_RADIAL",
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match *self {
            CameraModel::SimplePinhole { f, cx, cy } => vec![f, cx, cy],
            CameraModel::Pinhole { fx, fy, cx, cy } => vec![fx, fy, cx, cy],
            CameraModel::SimpleRadial { f, cx, cy, k } => vec![f, cx, cy, k],
        }
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        let (fx, fy, cx, cy) = match *self {
            CameraModel::SimplePinhole { f, cx, cy } | CameraModel::SimpleRadial { f, cx, cy, .. } => {
                (f, f, cx, cy)
            }
            CameraModel::Pinhole { fx, fy, cx, cy } => (fx, fy, cx, cy),
        };
        Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SfmCamera {
    pub camera_id: u32,
    pub model: CameraModel,
    pub width: u32,
    pub height: u32,
}

/// Pose of one registered image.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePose {
    pub image_id: u32,
    pub frame_id: u32,
    pub name: String,
    pub camera_id: u32,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

/// Cameras and per-frame poses, keyed by frame id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PoseSet {
    pub cameras: BTreeMap<u32, SfmCamera>,
    pub frames: BTreeMap<u32, FramePose>,
}

impl PoseSet {
    pub fn camera_for(&self, frame_id: u32) -> Result<&SfmCamera, GeometryError> {
        self.frames
            .get(&frame_id)
            .and_then(|f| self.cameras.get(&f.camera_id))
            .ok_or(GeometryError::MissingPose(frame_id))
    }

    pub fn projection(&self, frame_id: u32) -> Result<ProjectionMatrix, GeometryError> {
        let pose = self
            .frames
            .get(&frame_id)
            .ok_or(GeometryError::MissingPose(frame_id))?;
        let camera = self.camera_for(frame_id)?;
        Ok(compose_projection(
            &camera.model.intrinsics(),
            pose.rotation.to_rotation_matrix().matrix(),
            &pose.translation,
        ))
    }

    pub fn to_camera_set(&self) -> Result<CameraSet, GeometryError> {
        CameraSet::from_frames(
            self.frames
                .keys()
                .map(|&id| CameraFrame::new(id, self.projection(id)?))
                .collect::<Result<Vec<_>, _>>()?,
        )
    }
}

/// Trailing integer of an image name, ignoring its extension:
/// `frame_000350.jpg` is frame 350.
pub fn frame_id_from_name(name: &str) -> Option<u32> {
    let file = name.rsplit(['/', '\\']).next().unwrap_or(name);
    let stem = match file.rfind('.') {
        Some(p) if p > 0 => &file[..p],
        _ => file,
    };
    let digits = stem.len() - stem.trim_end_matches(|c: char| c.is_ascii_digit()).len();
    if digits == 0 {
        return None;
    }
    stem[stem.len() - digits..].parse().ok()
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
}

fn parse_field<T: std::str::FromStr>(line: usize, token: &str, what: &str) -> Result<T, IoError> {
    token
        .parse()
        .map_err(|_| IoError::parse(line, format!("invalid {what} '{token}'")))
}

fn parse_cameras_txt(text: &str) -> Result<BTreeMap<u32, SfmCamera>, IoError> {
    let mut cameras = BTreeMap::new();
    for (line, l) in content_lines(text) {
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let tok: Vec<&str> = l.split_whitespace().collect();
        if tok.len() < 4 {
            return Err(IoError::parse(line, "expected CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]"));
        }
        let camera_id: u32 = parse_field(line, tok[0], "camera id")?;
        let width: u32 = parse_field(line, tok[2], "width")?;
        let height: u32 = parse_field(line, tok[3], "height")?;
        let params = tok[4..]
            .iter()
            .map(|t| parse_field::<f64>(line, t, "camera parameter"))
            .collect::<Result<Vec<_>, _>>()?;
        let expect = |n: usize| -> Result<(), IoError> {
            if params.len() == n {
                Ok(())
            } else {
                Err(IoError::parse(
                    line,
                    format!("{} expects {n} parameters, found {}", tok[1], params.len()),
                ))
            }
        };
        let model = match tok[1] {
            "SIMPLE_PINHOLE" => {
                expect(3)?;
                CameraModel::SimplePinhole {
                    f: params[0],
                    cx: params[1],
                    cy: params[2],
                }
            }
            "PINHOLE" => {
                expect(4)?;
                CameraModel::Pinhole {
                    fx: params[0],
                    fy: params[1],
                    cx: params[2],
                    cy: params[3],
                }
            }
            "SIMPLE_RADIAL" => {
                expect(4)?;
                if params[3] != 0.0 {
                    warn!("camera {camera_id}: radial distortion k={} ignored", params[3]);
                }
                CameraModel::SimpleRadial {
                    f: params[0],
                    cx: params[1],
                    cy: params[2],
                    k: params[3],
                }
            }
            other => {
                return Err(IoError::UnsupportedCameraModel {
                    line,
                    model: other.to_owned(),
                })
            }
        };
        if params.iter().any(|p| !p.is_finite()) {
            return Err(IoError::parse(line, "non-finite camera parameter"));
        }
        let cam = SfmCamera {
            camera_id,
            model,
            width,
            height,
        };
        if cameras.insert(camera_id, cam).is_some() {
            return Err(IoError::parse(line, format!("duplicate camera id {camera_id}")));
        }
    }
    Ok(cameras)
}

/// Parses the `cameras.txt` / `images.txt` pair into a [`PoseSet`].
pub fn parse_sfm_export(cameras_text: &str, images_text: &str) -> Result<PoseSet, IoError> {
    let cameras = parse_cameras_txt(cameras_text)?;
    let mut frames = BTreeMap::new();

    // Each image occupies two lines; the second lists 2-D points and may be
    // empty. Blank lines are skipped only while looking for an image line.
    let mut lines = content_lines(images_text);
    while let Some((line, l)) = lines.next() {
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let tok: Vec<&str> = l.split_whitespace().collect();
        if tok.len() != 10 {
            return Err(IoError::parse(
                line,
                "expected IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME",
            ));
        }
        let image_id: u32 = parse_field(line, tok[0], "image id")?;
        let v = tok[1..8]
            .iter()
            .map(|t| parse_field::<f64>(line, t, "pose value"))
            .collect::<Result<Vec<_>, _>>()?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(IoError::parse(line, "non-finite pose value"));
        }
        let q = Quaternion::new(v[0], v[1], v[2], v[3]);
        if (q.norm() - 1.0).abs() > 1e-6 {
            return Err(IoError::parse(line, format!("quaternion norm {} is not 1", q.norm())));
        }
        let camera_id: u32 = parse_field(line, tok[8], "camera id")?;
        if !cameras.contains_key(&camera_id) {
            return Err(IoError::parse(line, format!("unknown camera id {camera_id}")));
        }
        let name = tok[9].to_owned();
        let frame_id = frame_id_from_name(&name)
            .ok_or_else(|| IoError::parse(line, format!("no frame number in image name '{name}'")))?;
        let pose = FramePose {
            image_id,
            frame_id,
            name,
            camera_id,
            rotation: UnitQuaternion::new_normalize(q),
            translation: Vector3::new(v[4], v[5], v[6]),
        };
        if frames.insert(frame_id, pose).is_some() {
            return Err(IoError::DuplicateFrame { line, frame_id });
        }
        // Points line.
        let _ = lines.next();
    }
    Ok(PoseSet { cameras, frames })
}

pub fn read_sfm_export(cameras_path: &Path, images_path: &Path) -> Result<PoseSet, IoError> {
    parse_sfm_export(&read_text(cameras_path)?, &read_text(images_path)?)
}

pub fn cameras_to_txt(poses: &PoseSet) -> String {
    let mut out = String::from("# Camera list with one line of data per camera:\n");
    out.push_str("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
    let _ = writeln!(out, "# Number of cameras: {}", poses.cameras.len());
    for c in poses.cameras.values() {
        let _ = write!(out, "{} {} {} {}", c.camera_id, c.model.name(), c.width, c.height);
        for p in c.model.params() {
            let _ = write!(out, " {p}");
        }
        out.push('\n');
    }
    out
}

pub fn images_to_txt(poses: &PoseSet) -> String {
    let mut out = String::from("# Image list with two lines of data per image:\n");
    out.push_str("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n");
    out.push_str("#   POINTS2D[] as (X, Y, POINT3D_ID)\n");
    let _ = writeln!(out, "# Number of images: {}", poses.frames.len());
    for f in poses.frames.values() {
        let q = f.rotation.quaternion();
        let t = &f.translation;
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {} {} {} {}",
            f.image_id, q.w, q.i, q.j, q.k, t.x, t.y, t.z, f.camera_id, f.name
        );
        out.push('\n');
    }
    out
}

/// One row of the exported points file.
#[derive(Debug, Clone, PartialEq)]
pub struct PointRecord {
    pub fruit_id: usize,
    pub position: Point3<f64>,
    pub inlier_count: usize,
    pub inlier_ratio: f64,
    pub row_label: Option<usize>,
}

pub const POINTS_HEADER: &str = "fruit_id,x,y,z,inlier_count,inlier_ratio,row_label";
pub const TRACKS_HEADER: &str = "fruit_id,frame_id,detection_index";

pub fn point_records(estimates: &[FruitEstimate], row_labels: &[Option<usize>]) -> Vec<PointRecord> {
    estimates
        .iter()
        .enumerate()
        .map(|(i, e)| PointRecord {
            fruit_id: i,
            position: e.point(),
            inlier_count: e.inlier_nodes.len(),
            inlier_ratio: e.inlier_ratio,
            row_label: row_labels.get(i).copied().flatten(),
        })
        .collect()
}

/// Points table; unassigned rows are written as `-1`.
pub fn points_to_csv(records: &[PointRecord]) -> String {
    let mut out = format!("{POINTS_HEADER}\n");
    for r in records {
        let row = r.row_label.map_or("-1".to_owned(), |l| l.to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.fruit_id, r.position.x, r.position.y, r.position.z, r.inlier_count, r.inlier_ratio, row
        );
    }
    out
}

pub fn parse_points_csv(text: &str) -> Result<Vec<PointRecord>, IoError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, h)) if h == POINTS_HEADER => {}
        _ => return Err(IoError::parse(1, format!("expected header '{POINTS_HEADER}'"))),
    }
    let mut records = Vec::new();
    for (line, l) in lines {
        if l.is_empty() {
            continue;
        }
        let f: Vec<&str> = l.split(',').collect();
        if f.len() != 7 {
            return Err(IoError::parse(line, format!("expected 7 fields, found {}", f.len())));
        }
        let row: i64 = parse_field(line, f[6], "row label")?;
        records.push(PointRecord {
            fruit_id: parse_field(line, f[0], "fruit id")?,
            position: Point3::new(
                parse_field(line, f[1], "coordinate")?,
                parse_field(line, f[2], "coordinate")?,
                parse_field(line, f[3], "coordinate")?,
            ),
            inlier_count: parse_field(line, f[4], "inlier count")?,
            inlier_ratio: parse_field(line, f[5], "inlier ratio")?,
            row_label: match row {
                -1 => None,
                r if r >= 0 => Some(r as usize),
                _ => return Err(IoError::parse(line, "row label must be -1 or non-negative")),
            },
        });
    }
    Ok(records)
}

pub fn tracks_to_csv(estimates: &[FruitEstimate]) -> String {
    let mut out = format!("{TRACKS_HEADER}\n");
    for (i, e) in estimates.iter().enumerate() {
        for n in &e.inlier_nodes {
            let _ = writeln!(out, "{i},{},{}", n.frame_id, n.detection_index);
        }
    }
    out
}

/// Categorical palette for row colors; cycles past ten rows.
pub const ROW_PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

pub const UNASSIGNED_COLOR: [u8; 3] = [0, 0, 0];

pub fn row_color(label: Option<usize>) -> [u8; 3] {
    label.map_or(UNASSIGNED_COLOR, |l| ROW_PALETTE[l % ROW_PALETTE.len()])
}

/// ASCII PLY point cloud with per-vertex row colors.
pub fn points_to_ply(records: &[PointRecord]) -> String {
    let mut out = String::from("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", records.len());
    out.push_str("property float x\nproperty float y\nproperty float z\n");
    out.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    out.push_str("end_header\n");
    for r in records {
        let [red, green, blue] = row_color(r.row_label);
        let _ = writeln!(
            out,
            "{} {} {} {red} {green} {blue}",
            r.position.x, r.position.y, r.position.z
        );
    }
    out
}

/// Paths of the files written by [`export_results`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExportedFiles {
    pub points: PathBuf,
    pub tracks: PathBuf,
    pub cloud: PathBuf,
}

/// Writes `points.csv`, `tracks.csv` and `points.ply` into `out_dir`.
pub fn export_results(
    out_dir: &Path,
    estimates: &[FruitEstimate],
    row_labels: &[Option<usize>],
) -> Result<ExportedFiles, IoError> {
    fs::create_dir_all(out_dir).map_err(|source| IoError::Io {
        path: out_dir.to_owned(),
        source,
    })?;
    let records = point_records(estimates, row_labels);
    let files = ExportedFiles {
        points: out_dir.join("points.csv"),
        tracks: out_dir.join("tracks.csv"),
        cloud: out_dir.join("points.ply"),
    };
    write_text(&files.points, &points_to_csv(&records))?;
    write_text(&files.tracks, &tracks_to_csv(estimates))?;
    write_text(&files.cloud, &points_to_ply(&records))?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::association::{NodeId, TrackPath};
    use crate::geometry::HomogeneousPoint3;
    use approx::assert_relative_eq;

    #[test]
    fn single_detection_row() {
        let d = parse_detections_str("frame_id,x,y\n350,512.5,300.0\n").unwrap();
        assert_eq!(d.len(), 1);
        let det = &d[&350][0];
        assert_eq!(det.detection_index, 0);
        assert_eq!(det.centroid, Point2::new(512.5, 300.0));
    }

    #[test]
    fn empty_body_is_empty_set() {
        assert!(parse_detections_str("frame_id,x,y\n").unwrap().is_empty());
        assert!(parse_detections_str("[]").unwrap().is_empty());
    }

    #[test]
    fn indices_follow_file_order_and_frames_sort() {
        let text = "frame_id,x,y,score\n7,1,1,0.5\n3,2,2,\n7,3,3,0.9\n";
        let d = parse_detections_str(text).unwrap();
        assert_eq!(d.keys().copied().collect::<Vec<_>>(), vec![3, 7]);
        assert_eq!(d[&7][1].centroid, Point2::new(3.0, 3.0));
        assert_eq!(d[&7][1].detection_index, 1);
        assert_eq!(d[&3][0].score, None);
        assert_eq!(d[&7][0].score, Some(0.5));
    }

    #[test]
    fn json_detections() {
        let text = r#"[{"frame_id": 2, "x": 10.0, "y": 20.0, "bbox": [5, 15, 10, 10], "score": 0.8},
                       {"frame_id": 1, "x": 1.5, "y": 2.5}]"#;
        let d = parse_detections_str(text).unwrap();
        assert_eq!(d[&2][0].bbox, Some([5.0, 15.0, 10.0, 10.0]));
        assert_eq!(d[&1][0].centroid, Point2::new(1.5, 2.5));
    }

    #[test]
    fn malformed_detection_lines_report_line_numbers() {
        let err = parse_detections_str("frame_id,x,y\n1,2,3\n1,abc,3\n").unwrap_err();
        assert_eq!(err.line(), Some(3));
        let err = parse_detections_str("frame_id,x,y\n1,2,3\n\n1,2\n").unwrap_err();
        assert_eq!(err.line(), Some(4));
        let err = parse_detections_str("frame_id,x,y\n1,-2,3\n").unwrap_err();
        assert!(matches!(err, IoError::NegativeCoordinate { line: 2 }));
        let err = parse_detections_str("frame,x,y\n").unwrap_err();
        assert_eq!(err.line(), Some(1));
        let err = parse_detections_str("frame_id,x,y\n-1,2,3\n").unwrap_err();
        assert_eq!(err.line(), Some(2));
    }

    #[test]
    fn detections_round_trip_with_optional_fields() {
        let text = "frame_id,x,y,bbox_x,bbox_y,bbox_w,bbox_h,score\n1,0.1,0.2,0,0,4,4,0.25\n1,5,6,,,,,\n";
        let d = parse_detections_str(text).unwrap();
        assert_eq!(parse_detections_str(&detections_to_csv(&d)).unwrap(), d);
    }

    #[test]
    fn frame_numbers_from_names() {
        assert_eq!(frame_id_from_name("frame_000350.jpg"), Some(350));
        assert_eq!(frame_id_from_name("video/img12.png"), Some(12));
        assert_eq!(frame_id_from_name("42"), Some(42));
        assert_eq!(frame_id_from_name("cover.jpg"), None);
    }

    const CAMERAS: &str = "# comment\n1 PINHOLE 3840 2160 3000 3000 1920 1080\n";

    #[test]
    fn identity_pose_projection() {
        let images = "1 1 0 0 0 0 0 0 1 frame_000350.jpg\n\n";
        let poses = parse_sfm_export(CAMERAS, images).unwrap();
        let p = poses.projection(350).unwrap();
        let expected = ProjectionMatrix::new(
            3000.0, 0.0, 1920.0, 0.0, 0.0, 3000.0, 1080.0, 0.0, 0.0, 0.0, 1.0, 0.0,
        );
        assert_eq!(p, expected);
    }

    #[test]
    fn half_turn_about_z() {
        let images = "1 0 0 0 1 0 0 0 1 f_1.png\n100 200 -1\n";
        let poses = parse_sfm_export(CAMERAS, images).unwrap();
        let r = poses.frames[&1].rotation.to_rotation_matrix();
        assert_relative_eq!(
            *r.matrix(),
            Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0)),
            epsilon = 1e-15
        );
        let k = poses.cameras[&1].model.intrinsics();
        assert_relative_eq!(
            poses.projection(1).unwrap(),
            compose_projection(&k, r.matrix(), &Vector3::zeros()),
            epsilon = 1e-12
        );
    }

    #[test]
    fn images_without_points_lines() {
        // Trailing image with no points line at end of file.
        let images = "1 1 0 0 0 0 0 0 1 a_1.jpg\n\n2 1 0 0 0 1 0 0 1 a_2.jpg";
        let poses = parse_sfm_export(CAMERAS, images).unwrap();
        assert_eq!(poses.frames.len(), 2);
        assert!(poses.to_camera_set().is_ok());
    }

    #[test]
    fn pose_errors() {
        let err = parse_sfm_export("1 OPENCV 10 10 1 1 1 1 0 0 0 0\n", "").unwrap_err();
        assert!(matches!(err, IoError::UnsupportedCameraModel { line: 1, .. }));

        let images = "1 1 0 0 0 0 0 0 1 a_5.jpg\n\n2 1 0 0 0 1 0 0 1 b_5.jpg\n\n";
        let err = parse_sfm_export(CAMERAS, images).unwrap_err();
        assert!(matches!(err, IoError::DuplicateFrame { line: 3, frame_id: 5 }));

        let images = "# header\n1 2 0 0 0 0 0 0 1 a_5.jpg\n\n";
        assert_eq!(parse_sfm_export(CAMERAS, images).unwrap_err().line(), Some(2));

        let images = "1 1 0 0 0 0 0 0 9 a_5.jpg\n\n";
        assert_eq!(parse_sfm_export(CAMERAS, images).unwrap_err().line(), Some(1));

        let err = parse_sfm_export("# x\n\n1 PINHOLE 3840 2160 3000 3000\n", "").unwrap_err();
        assert_eq!(err.line(), Some(3));
    }

    #[test]
    fn simple_radial_is_accepted() {
        let poses = parse_sfm_export(
            "2 SIMPLE_RADIAL 100 100 50 50 50 0.01\n",
            "1 1 0 0 0 0 0 0 2 x_1.jpg\n\n",
        )
        .unwrap();
        assert_eq!(poses.cameras[&2].model.intrinsics()[(0, 0)], 50.0);
    }

    fn estimate_at(x: f64, y: f64, z: f64) -> FruitEstimate {
        FruitEstimate {
            position: HomogeneousPoint3::from_euclidean(&Point3::new(x, y, z)),
            inlier_nodes: vec![NodeId::new(1, 0), NodeId::new(2, 3)],
            inlier_ratio: 2.0 / 3.0,
            track: TrackPath {
                nodes: vec![NodeId::new(1, 0), NodeId::new(2, 3), NodeId::new(3, 1)],
            },
        }
    }

    #[test]
    fn ply_vertex_line() {
        let records = point_records(&[estimate_at(1.0, 2.0, 3.0)], &[Some(0)]);
        let ply = points_to_ply(&records);
        assert!(ply.contains("element vertex 1\n"));
        let [r, g, b] = ROW_PALETTE[0];
        assert!(ply.ends_with(&format!("end_header\n1 2 3 {r} {g} {b}\n")));
    }

    #[test]
    fn empty_exports() {
        let dir = tempfile::tempdir().unwrap();
        let files = export_results(dir.path(), &[], &[]).unwrap();
        assert_eq!(read_text(&files.points).unwrap(), format!("{POINTS_HEADER}\n"));
        assert_eq!(read_text(&files.tracks).unwrap(), format!("{TRACKS_HEADER}\n"));
        assert!(read_text(&files.cloud).unwrap().contains("element vertex 0\n"));
        assert!(parse_points_csv(&read_text(&files.points).unwrap()).unwrap().is_empty());
    }

    #[test]
    fn points_and_tracks_files() {
        let est = [estimate_at(0.1, -2.5, 1e-7), estimate_at(123.456789012345, 2.0, 3.0)];
        let records = point_records(&est, &[Some(1), None]);
        let parsed = parse_points_csv(&points_to_csv(&records)).unwrap();
        assert_eq!(parsed, records);
        assert_eq!(tracks_to_csv(&est).lines().count(), 5);
        assert!(tracks_to_csv(&est).contains("\n1,2,3\n"));
    }
}
