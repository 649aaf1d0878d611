//! Homogeneous primitives, the pinhole camera, and two-view epipolar geometry.
//!
//! All quantities are kept in homogeneous form until the last moment. Image
//! points are `(x, y, 1)` in pixels, scene points are `(X, Y, Z, 1)` in scene
//! units. A camera is fully described by its 3×4 projection matrix.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Point2, Point3, Vector3, Vector4};
use thiserror::Error;

/// 3×4 projection matrix.
pub type ProjectionMatrix = Matrix3x4<f64>;

/// Relative singular-value tolerance for rank decisions.
pub const RANK_TOLERANCE: f64 = 1e-10;

const DEGENERATE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("homogeneous vector has all components zero")]
    ZeroVector,
    #[error("point lies at infinity")]
    PointAtInfinity,
    #[error("projected point has vanishing scale (point in the principal plane)")]
    DegenerateProjection,
    #[error("projection matrix is rank deficient (sigma ratio {ratio:e})")]
    RankDeficient { ratio: f64 },
    #[error("frames {from} and {to} share the same camera center")]
    CoincidentCenters { from: u32, to: u32 },
    #[error("epipolar line is degenerate (point coincides with the epipole)")]
    DegenerateLine,
    #[error("no camera pose for frame {0}")]
    MissingPose(u32),
    #[error("duplicate camera pose for frame {0}")]
    DuplicateFrame(u32),
}

/// Homogeneous image point `(x, y, w)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomogeneousPoint2 {
    coords: Vector3<f64>,
}

impl HomogeneousPoint2 {
    /// Finite pixel location `(x, y, 1)`.
    pub fn from_pixel(x: f64, y: f64) -> Self {
        Self {
            coords: Vector3::new(x, y, 1.0),
        }
    }

    pub fn from_coords(coords: Vector3<f64>) -> Result<Self, GeometryError> {
        if coords.iter().all(|c| *c == 0.0) {
            return Err(GeometryError::ZeroVector);
        }
        Ok(Self { coords })
    }

    /// Like [`Self::from_coords`] but also rejects points at infinity. Used for
    /// detection centroids.
    pub fn finite(coords: Vector3<f64>) -> Result<Self, GeometryError> {
        let p = Self::from_coords(coords)?;
        p.normalized()
    }

    pub fn coords(&self) -> &Vector3<f64> {
        &self.coords
    }

    pub fn is_finite(&self) -> bool {
        self.coords.z.abs() > DEGENERATE_EPS * self.coords.norm()
    }

    /// Rescaled so the last component is 1.
    pub fn normalized(&self) -> Result<Self, GeometryError> {
        if !self.is_finite() {
            return Err(GeometryError::PointAtInfinity);
        }
        Ok(Self {
            coords: self.coords / self.coords.z,
        })
    }

    pub fn to_pixel(&self) -> Option<Point2<f64>> {
        self.is_finite()
            .then(|| Point2::new(self.coords.x / self.coords.z, self.coords.y / self.coords.z))
    }
}

/// Homogeneous scene point `(X, Y, Z, W)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomogeneousPoint3 {
    coords: Vector4<f64>,
}

impl HomogeneousPoint3 {
    pub fn from_euclidean(p: &Point3<f64>) -> Self {
        Self {
            coords: p.to_homogeneous(),
        }
    }

    pub fn from_coords(coords: Vector4<f64>) -> Result<Self, GeometryError> {
        if coords.iter().all(|c| *c == 0.0) {
            return Err(GeometryError::ZeroVector);
        }
        Ok(Self { coords })
    }

    pub fn coords(&self) -> &Vector4<f64> {
        &self.coords
    }

    pub fn is_finite(&self) -> bool {
        self.coords.w.abs() > DEGENERATE_EPS * self.coords.norm()
    }

    pub fn to_euclidean(&self) -> Option<Point3<f64>> {
        self.is_finite().then(|| {
            let w = self.coords.w;
            Point3::new(self.coords.x / w, self.coords.y / w, self.coords.z / w)
        })
    }
}

/// One frame of the sequence: projection matrix and its cached center.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame {
    frame_id: u32,
    projection: ProjectionMatrix,
    center: HomogeneousPoint3,
}

impl CameraFrame {
    pub fn new(frame_id: u32, projection: ProjectionMatrix) -> Result<Self, GeometryError> {
        let center = camera_center(&projection)?;
        Ok(Self {
            frame_id,
            projection,
            center,
        })
    }

    pub fn frame_id(&self) -> u32 {
        self.frame_id
    }

    pub fn projection(&self) -> &ProjectionMatrix {
        &self.projection
    }

    pub fn center(&self) -> &HomogeneousPoint3 {
        &self.center
    }
}

/// Cameras keyed by frame id, iterated in ascending frame order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CameraSet {
    frames: BTreeMap<u32, CameraFrame>,
}

impl CameraSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_frames<I>(frames: I) -> Result<Self, GeometryError>
    where
        I: IntoIterator<Item = CameraFrame>,
    {
        let mut set = Self::new();
        for frame in frames {
            set.insert(frame)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, frame: CameraFrame) -> Result<(), GeometryError> {
        let id = frame.frame_id();
        if self.frames.contains_key(&id) {
            return Err(GeometryError::DuplicateFrame(id));
        }
        self.frames.insert(id, frame);
        Ok(())
    }

    pub fn get(&self, frame_id: u32) -> Result<&CameraFrame, GeometryError> {
        self.frames
            .get(&frame_id)
            .ok_or(GeometryError::MissingPose(frame_id))
    }

    pub fn contains(&self, frame_id: u32) -> bool {
        self.frames.contains_key(&frame_id)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.frames.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &CameraFrame> {
        self.frames.values()
    }
}

/// Fundamental matrix mapping points of `from_frame` to lines in `to_frame`.
#[derive(Debug, Clone, PartialEq)]
pub struct FundamentalMatrix {
    pub matrix: Matrix3<f64>,
    pub from_frame: u32,
    pub to_frame: u32,
}

/// Line `a x + b y + c = 0` in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpipolarLine {
    coeffs: Vector3<f64>,
}

impl EpipolarLine {
    pub fn new(coeffs: Vector3<f64>) -> Result<Self, GeometryError> {
        if coeffs.x.abs() < DEGENERATE_EPS && coeffs.y.abs() < DEGENERATE_EPS {
            return Err(GeometryError::DegenerateLine);
        }
        Ok(Self { coeffs })
    }

    pub fn coeffs(&self) -> &Vector3<f64> {
        &self.coeffs
    }
}

/// `x = P X`, rescaled to unit last component.
pub fn project(
    frame: &CameraFrame,
    point: &HomogeneousPoint3,
) -> Result<HomogeneousPoint2, GeometryError> {
    project_with(frame.projection(), point)
}

pub(crate) fn project_with(
    projection: &ProjectionMatrix,
    point: &HomogeneousPoint3,
) -> Result<HomogeneousPoint2, GeometryError> {
    let x = projection * point.coords();
    if x.z.abs() < DEGENERATE_EPS {
        return Err(GeometryError::DegenerateProjection);
    }
    Ok(HomogeneousPoint2 { coords: x / x.z })
}

/// Right null vector of `P`, i.e. the camera center with `P C = 0`.
pub fn camera_center(projection: &ProjectionMatrix) -> Result<HomogeneousPoint3, GeometryError> {
    // Padding with a zero row gives a square system whose SVD carries the full V.
    let mut padded = Matrix4::<f64>::zeros();
    padded.fixed_view_mut::<3, 4>(0, 0).copy_from(projection);
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");

    let mut order: [usize; 4] = [0, 1, 2, 3];
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let largest = svd.singular_values[order[0]];
    let second_smallest = svd.singular_values[order[2]];
    if largest == 0.0 || second_smallest < RANK_TOLERANCE * largest {
        let ratio = if largest == 0.0 {
            0.0
        } else {
            second_smallest / largest
        };
        return Err(GeometryError::RankDeficient { ratio });
    }

    let null = v_t.row(order[3]).transpose();
    let mut center = HomogeneousPoint3::from_coords(null)?;
    if center.is_finite() {
        center.coords /= center.coords.w;
    }
    Ok(center)
}

/// `F = [e_j]_x P_j P_i^+` with `e_j = P_j C_i`, scaled to unit Frobenius norm.
pub fn fundamental_from_projections(
    frame_i: &CameraFrame,
    frame_j: &CameraFrame,
) -> Result<FundamentalMatrix, GeometryError> {
    let coincident = GeometryError::CoincidentCenters {
        from: frame_i.frame_id(),
        to: frame_j.frame_id(),
    };
    if centers_coincide(frame_i.center(), frame_j.center()) {
        return Err(coincident);
    }

    let p_i = frame_i.projection();
    let p_j = frame_j.projection();
    let svd = p_i.svd(true, true);
    let sigma_max = svd.singular_values.max();
    let pinv = svd
        .pseudo_inverse(RANK_TOLERANCE * sigma_max)
        .map_err(|_| GeometryError::RankDeficient { ratio: 0.0 })?;

    let epipole = p_j * frame_i.center().coords();
    let f = epipole.cross_matrix() * p_j * pinv;
    let norm = f.norm();
    if norm < DEGENERATE_EPS * p_j.norm() {
        return Err(coincident);
    }
    Ok(FundamentalMatrix {
        matrix: f / norm,
        from_frame: frame_i.frame_id(),
        to_frame: frame_j.frame_id(),
    })
}

fn centers_coincide(a: &HomogeneousPoint3, b: &HomogeneousPoint3) -> bool {
    match (a.to_euclidean(), b.to_euclidean()) {
        (Some(ca), Some(cb)) => (ca - cb).norm() <= 1e-9,
        (None, None) => {
            let ua = a.coords().normalize();
            let ub = b.coords().normalize();
            (ua - ub).norm() <= 1e-12 || (ua + ub).norm() <= 1e-12
        }
        _ => false,
    }
}

/// `l = F x` for a finite image point.
pub fn epipolar_line(
    f: &FundamentalMatrix,
    point: &HomogeneousPoint2,
) -> Result<EpipolarLine, GeometryError> {
    let x = point.normalized()?;
    EpipolarLine::new(f.matrix * x.coords())
}

/// Unsigned distance in pixels from `point` to `line`.
pub fn point_line_distance(
    point: &HomogeneousPoint2,
    line: &EpipolarLine,
) -> Result<f64, GeometryError> {
    let x = point.normalized()?;
    let l = line.coeffs();
    let scale = l.x.hypot(l.y);
    if scale < DEGENERATE_EPS {
        return Err(GeometryError::DegenerateLine);
    }
    Ok(l.dot(x.coords()).abs() / scale)
}

/// `K [R | t]` for a world-to-camera pose `x_cam = R X + t`.
pub fn compose_projection(
    intrinsics: &Matrix3<f64>,
    rotation: &Matrix3<f64>,
    translation: &Vector3<f64>,
) -> ProjectionMatrix {
    let mut rt = ProjectionMatrix::zeros();
    rt.fixed_view_mut::<3, 3>(0, 0).copy_from(rotation);
    rt.set_column(3, translation);
    intrinsics * rt
}
