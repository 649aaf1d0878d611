//! Linear multi-view triangulation and its RANSAC wrapper over a candidate track.

use nalgebra::{DMatrix, Matrix3, Matrix4, Matrix6x4, Point2, RowVector4};
use rand::Rng;
use thiserror::Error;

use crate::geometry::{
    project_with, CameraSet, GeometryError, HomogeneousPoint2, HomogeneousPoint3, ProjectionMatrix,
};

/// Size of the minimal sample drawn by [`triangulation_ransac`].
pub const MINIMAL_SAMPLE: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TriangulationError {
    #[error("need at least {needed} views, got {got}")]
    InsufficientViews { needed: usize, got: usize },
    #[error("views are degenerate (parallel or coincident rays)")]
    DegenerateGeometry,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// A detection centroid tagged with the frame it was observed in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub frame_id: u32,
    pub centroid: HomogeneousPoint2,
}

impl Observation {
    pub fn new(frame_id: u32, x: f64, y: f64) -> Self {
        Self {
            frame_id,
            centroid: HomogeneousPoint2::from_pixel(x, y),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacParams {
    pub iterations: usize,
    /// Inlier threshold on the reprojection distance, in pixels.
    pub tau_geom: f64,
    /// Hypotheses with fewer inliers are discarded.
    pub min_inliers: usize,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            iterations: 50,
            tau_geom: 3.0,
            min_inliers: MINIMAL_SAMPLE,
        }
    }
}

/// Outcome of [`triangulation_ransac`]. `point` is `None` exactly when no
/// hypothesis gathered `min_inliers` inliers.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangulationResult {
    pub point: Option<HomogeneousPoint3>,
    pub inliers: Vec<Observation>,
    /// Positions of the inliers inside the input track, ascending.
    pub inlier_indices: Vec<usize>,
    /// Reprojection error of every track observation against `point`;
    /// empty when there is no point.
    pub reprojection_errors: Vec<f64>,
}

impl TriangulationResult {
    fn empty() -> Self {
        Self {
            point: None,
            inliers: Vec::new(),
            inlier_indices: Vec::new(),
            reprojection_errors: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.inliers.is_empty()
    }
}

/// Similarity transform moving `points` to zero mean and mean radius sqrt(2).
fn isotropic_normalization(points: &[Point2<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.y).sum::<f64>() / n;
    let mean_dist = points
        .iter()
        .map(|p| (p.x - cx).hypot(p.y - cy))
        .sum::<f64>()
        / n;
    let s = if mean_dist > 1e-12 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

/// Least-squares triangulation from the stacked constraints `x × (P X) = 0`.
pub fn triangulate_dlt(
    observations: &[Observation],
    cameras: &CameraSet,
) -> Result<HomogeneousPoint3, TriangulationError> {
    if observations.len() < 2 {
        return Err(TriangulationError::InsufficientViews {
            needed: 2,
            got: observations.len(),
        });
    }
    let views = resolve(observations, cameras)?;
    let refs: Vec<&View> = views.iter().collect();
    solve_dlt(&refs)
}

/// An observation with its camera looked up.
struct View<'a> {
    projection: &'a ProjectionMatrix,
    pixel: Point2<f64>,
}

fn resolve<'a>(observations: &[Observation], cameras: &'a CameraSet) -> Result<Vec<View<'a>>, TriangulationError> {
    observations
        .iter()
        .map(|o| {
            Ok(View {
                projection: cameras.get(o.frame_id)?.projection(),
                pixel: o.centroid.to_pixel().ok_or(GeometryError::PointAtInfinity)?,
            })
        })
        .collect()
}

fn solve_dlt(views: &[&View]) -> Result<HomogeneousPoint3, TriangulationError> {
    let pixels: Vec<Point2<f64>> = views.iter().map(|v| v.pixel).collect();
    let t = isotropic_normalization(&pixels);
    let rows: Vec<RowVector4<f64>> = views
        .iter()
        .flat_map(|view| {
            let p = t * view.projection;
            let p = p / p.norm();
            let x = t * view.pixel.to_homogeneous();
            let (u, v) = (x.x / x.z, x.y / x.z);
            [p.row(2) * u - p.row(0), p.row(2) * v - p.row(1)]
        })
        .collect();

    // The minimal sample is solved on the stack; it dominates RANSAC time.
    let (singular, v_t) = if rows.len() == 2 * MINIMAL_SAMPLE {
        let svd = Matrix6x4::from_rows(&rows).svd(false, true);
        let v_t = svd.v_t.ok_or(TriangulationError::DegenerateGeometry)?;
        (svd.singular_values.as_slice().to_vec(), v_t)
    } else {
        let svd = DMatrix::from_fn(rows.len(), 4, |r, c| rows[r][c]).svd(false, true);
        let v_t = svd.v_t.ok_or(TriangulationError::DegenerateGeometry)?;
        let v_t = Matrix4::from_fn(|r, c| v_t[(r, c)]);
        (svd.singular_values.as_slice().to_vec(), v_t)
    };
    let mut order: Vec<usize> = (0..singular.len()).collect();
    order.sort_by(|&i, &j| singular[j].total_cmp(&singular[i]));
    let (largest, second, smallest) = (singular[order[0]], singular[order[2]], singular[order[3]]);
    if largest == 0.0 || second - smallest <= 1e-8 * largest {
        return Err(TriangulationError::DegenerateGeometry);
    }

    let x = v_t.row(order[3]).transpose();
    let point = HomogeneousPoint3::from_coords(x)?;
    match point.to_euclidean() {
        Some(e) => Ok(HomogeneousPoint3::from_euclidean(&e)),
        None => Err(TriangulationError::DegenerateGeometry),
    }
}

/// Pixel distance between the projection of `point` and the observed centroid.
pub fn geometric_error(
    point: &HomogeneousPoint3,
    obs: &Observation,
    cameras: &CameraSet,
) -> Result<f64, TriangulationError> {
    let frame = cameras.get(obs.frame_id)?;
    let projected = project_with(frame.projection(), point)?;
    let a = projected.to_pixel().ok_or(GeometryError::DegenerateProjection)?;
    let b = obs
        .centroid
        .to_pixel()
        .ok_or(GeometryError::PointAtInfinity)?;
    Ok((a - b).norm())
}

fn errors_against(point: &HomogeneousPoint3, views: &[View]) -> Vec<f64> {
    views
        .iter()
        .map(|v| {
            project_with(v.projection, point)
                .ok()
                .and_then(|p| p.to_pixel())
                .map_or(f64::INFINITY, |p| (p - v.pixel).norm())
        })
        .collect()
}

fn binomial3(n: usize) -> usize {
    if n < 3 {
        0
    } else {
        n * (n - 1) * (n - 2) / 6
    }
}

struct Hypothesis {
    point: HomogeneousPoint3,
    errors: Vec<f64>,
    inliers: Vec<usize>,
    mean_error: f64,
}

/// Robust triangulation of a track from 3-view minimal samples.
///
/// When the iteration budget covers every distinct 3-subset of the track, the
/// subsets are visited exhaustively instead of being redrawn at random.
pub fn triangulation_ransac<R: Rng + ?Sized>(
    track: &[Observation],
    cameras: &CameraSet,
    params: &RansacParams,
    rng: &mut R,
) -> Result<TriangulationResult, TriangulationError> {
    let n = track.len();
    if n < MINIMAL_SAMPLE {
        return Err(TriangulationError::InsufficientViews {
            needed: MINIMAL_SAMPLE,
            got: n,
        });
    }

    let samples: Vec<[usize; 3]> = if binomial3(n) <= params.iterations {
        let mut all = Vec::with_capacity(binomial3(n));
        for a in 0..n {
            for b in a + 1..n {
                for c in b + 1..n {
                    all.push([a, b, c]);
                }
            }
        }
        all
    } else {
        (0..params.iterations)
            .map(|_| {
                let idx = rand::seq::index::sample(rng, n, MINIMAL_SAMPLE);
                [idx.index(0), idx.index(1), idx.index(2)]
            })
            .collect()
    };

    let views = resolve(track, cameras)?;
    let mut best: Option<Hypothesis> = None;
    for sample in samples {
        let subset = [&views[sample[0]], &views[sample[1]], &views[sample[2]]];
        let Ok(point) = solve_dlt(&subset) else {
            continue;
        };
        let errors = errors_against(&point, &views);
        let inliers: Vec<usize> = (0..n).filter(|&i| errors[i] <= params.tau_geom).collect();
        if inliers.is_empty() {
            continue;
        }
        let mean_error = inliers.iter().map(|&i| errors[i]).sum::<f64>() / inliers.len() as f64;
        let better = match &best {
            None => true,
            Some(b) => {
                inliers.len() > b.inliers.len()
                    || (inliers.len() == b.inliers.len() && mean_error < b.mean_error)
            }
        };
        if better {
            best = Some(Hypothesis {
                point,
                errors,
                inliers,
                mean_error,
            });
        }
    }

    match best {
        Some(h) if h.inliers.len() >= params.min_inliers.max(1) => Ok(TriangulationResult {
            point: Some(h.point),
            inliers: h.inliers.iter().map(|&i| track[i]).collect(),
            inlier_indices: h.inliers,
            reprojection_errors: h.errors,
        }),
        _ => Ok(TriangulationResult::empty()),
    }
}

/// Re-triangulates over every inlier of `result`.
pub fn refine_from_inliers(
    result: &TriangulationResult,
    cameras: &CameraSet,
) -> Result<HomogeneousPoint3, TriangulationError> {
    triangulate_dlt(&result.inliers, cameras)
}

const GROWTH_ROUNDS: usize = 8;

/// Re-triangulates over the inliers and re-classifies every observation of
/// the track against the refined point until the inlier set is stable.
///
/// The set may grow for a few rounds and then only shrinks, so the loop ends.
/// Every returned index has error at most `tau_geom` against the returned
/// point. Returns `None` if fewer than `min_inliers` survive.
pub fn refine_consensus(
    track: &[Observation],
    inlier_indices: &[usize],
    cameras: &CameraSet,
    tau_geom: f64,
    min_inliers: usize,
) -> Option<(HomogeneousPoint3, Vec<usize>)> {
    let views = resolve(track, cameras).ok()?;
    let mut current = inlier_indices.to_vec();
    for round in 0.. {
        if current.len() < min_inliers.max(2) {
            return None;
        }
        let subset: Vec<&View> = current.iter().map(|&i| &views[i]).collect();
        let point = solve_dlt(&subset).ok()?;
        let errors = errors_against(&point, &views);
        let next: Vec<usize> = if round < GROWTH_ROUNDS {
            (0..track.len()).filter(|&i| errors[i] <= tau_geom).collect()
        } else {
            current.iter().copied().filter(|&i| errors[i] <= tau_geom).collect()
        };
        if next == current {
            return Some((point, current));
        }
        current = next;
    }
    unreachable!("the shrinking phase terminates")
}
