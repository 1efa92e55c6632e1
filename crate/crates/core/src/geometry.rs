//! Rigid and similarity transforms, pinhole projection and Umeyama alignment.
//!
//! Poses are always camera-from-world: `X_cam = R * X_world + t`.

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::Modality;

/// Tolerance on the quaternion norm accepted at construction.
pub const QUAT_NORM_TOL: f64 = 1e-9;
/// Norm below which a translation is treated as "no motion".
pub const TRANSLATION_EPS: f64 = 1e-9;

pub type Vec3 = Vector3<f64>;

/// Camera-from-world rigid transform.
#[derive(Clone, Copy, Debug)]
pub struct CameraPose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl CameraPose {
    pub fn identity() -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: Vec3::zeros() }
    }

    /// Builds a pose from a `[w, x, y, z]` quaternion, rejecting non-unit input.
    pub fn from_wxyz(quat: [f64; 4], translation: [f64; 3]) -> Result<Self> {
        let q = Quaternion::new(quat[0], quat[1], quat[2], quat[3]);
        let norm = q.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > QUAT_NORM_TOL {
            return Err(Error::InvalidInput(format!("quaternion norm {norm} is not 1")));
        }
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite translation".into()));
        }
        Ok(Self {
            rotation: UnitQuaternion::new_unchecked(q),
            translation: Vec3::from(translation),
        })
    }

    pub fn from_parts(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn from_matrix(rotation: &Matrix3<f64>, translation: Vec3) -> Self {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(*rotation);
        Self { rotation: UnitQuaternion::from_rotation_matrix(&rot), translation }
    }

    /// Camera placed at `eye` looking at `target`, image y axis pointing down.
    pub fn look_at(eye: Vec3, target: Vec3, world_up: Vec3) -> Self {
        let z = (target - eye).normalize();
        let mut x = (-world_up).cross(&z);
        if x.norm() < 1e-12 {
            x = Vec3::x().cross(&z);
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Self::from_matrix(&r, -(r * eye))
    }

    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn inverse(&self) -> Self {
        let inv = self.rotation.inverse();
        Self { rotation: inv, translation: -(inv * self.translation) }
    }

    /// `self ∘ other`: first apply `other`, then `self`.
    pub fn compose(&self, other: &CameraPose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.inverse() * self.translation)
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Pose equality modulo the quaternion double cover.
    pub fn approx_eq(&self, other: &CameraPose, tol: f64) -> bool {
        let a = self.rotation.quaternion();
        let b = other.rotation.quaternion();
        let same = (a - b).norm().min((a + b).norm());
        same <= tol && (self.translation - other.translation).norm() <= tol
    }
}

impl PartialEq for CameraPose {
    fn eq(&self, other: &Self) -> bool {
        self.approx_eq(other, QUAT_NORM_TOL)
    }
}

/// Pose of camera `b` expressed in camera `a`'s frame.
pub fn relative_pose(a: &CameraPose, b: &CameraPose) -> CameraPose {
    let rotation = b.rotation * a.rotation.inverse();
    let translation = b.translation - rotation * a.translation;
    CameraPose { rotation, translation }
}

/// Geodesic rotation angle of a unit quaternion, in degrees.
pub fn rotation_angle_deg(q: &Quaternion<f64>) -> Result<f64> {
    let norm = q.norm();
    if !norm.is_finite() || (norm - 1.0).abs() > QUAT_NORM_TOL {
        return Err(Error::InvalidInput(format!("quaternion norm {norm} is not 1")));
    }
    let w = (q.w / norm).abs().min(1.0);
    Ok((2.0 * w.acos()).to_degrees())
}

/// Rotation angle between two poses' orientations.
pub fn rotation_error_deg(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    let d = a.inverse() * b;
    let q = d.quaternion();
    // atan2 keeps full precision near zero where acos loses half the digits
    (2.0 * q.vector().norm().atan2(q.w.abs())).to_degrees()
}

/// Angle between two directions in degrees.
///
/// Both vectors shorter than [`TRANSLATION_EPS`] give 0; exactly one gives 180.
pub fn translation_angle_deg(u: &Vec3, v: &Vec3) -> f64 {
    let (nu, nv) = (u.norm(), v.norm());
    match (nu < TRANSLATION_EPS, nv < TRANSLATION_EPS) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 180.0,
        (false, false) => u.cross(v).norm().atan2(u.dot(v)).to_degrees(),
    }
}

/// Pinhole intrinsics. Pixel `(u, v)` refers to the pixel center at integer index.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    /// Centered intrinsics with the given horizontal and vertical fields of view.
    pub fn from_fov(fov_x: f64, fov_y: f64, width: u32, height: u32) -> Self {
        Self {
            fx: width as f64 / (2.0 * (fov_x / 2.0).tan()),
            fy: height as f64 / (2.0 * (fov_y / 2.0).tan()),
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Horizontal and vertical field of view in radians.
    pub fn fov(&self) -> (f64, f64) {
        (
            2.0 * (self.width as f64 / (2.0 * self.fx)).atan(),
            2.0 * (self.height as f64 / (2.0 * self.fy)).atan(),
        )
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Unnormalized ray direction (z = 1) through pixel `(u, v)` in camera coordinates.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// Similarity transform `x ↦ s·R·x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self { scale: 1.0, rotation: Matrix3::identity(), translation: Vec3::zeros() }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.scale * (self.rotation * p) + self.translation
    }

    /// Re-expresses a camera-from-world pose in the transformed world frame.
    ///
    /// Camera coordinates are scaled by `s`, so the new pose is again rigid.
    pub fn transform_pose(&self, pose: &CameraPose) -> CameraPose {
        let r_c = pose.rotation_matrix();
        let r_new = r_c * self.rotation.transpose();
        let t_new = self.scale * pose.translation - r_new * self.translation;
        CameraPose::from_matrix(&r_new, t_new)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub modality: Option<Vec<Modality>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self { points, modality: None }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.iter().all(|c| c.is_finite()))
    }

    pub fn transformed(&self, sim: &SimilarityTransform) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| sim.apply(p)).collect(),
            modality: self.modality.clone(),
        }
    }

    pub fn extend(&mut self, other: PointCloud) {
        match (&mut self.modality, other.modality) {
            (Some(mine), Some(theirs)) => mine.extend(theirs),
            (mine, _) => *mine = None,
        }
        self.points.extend(other.points);
    }

    pub fn with_modality(mut self, modality: Modality) -> Self {
        self.modality = Some(vec![modality; self.points.len()]);
        self
    }
}

/// Row-major depth raster (z-depth along the optical axis).
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "depth buffer has {} values, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub valid: bool,
}

pub fn project(points: &PointCloud, pose: &CameraPose, k: &Intrinsics) -> Vec<Projection> {
    points
        .points
        .iter()
        .map(|p| {
            let c = pose.transform_point(p);
            if c.z <= 0.0 {
                return Projection { u: f64::NAN, v: f64::NAN, depth: c.z, valid: false };
            }
            Projection {
                u: k.fx * c.x / c.z + k.cx,
                v: k.fy * c.y / c.z + k.cy,
                depth: c.z,
                valid: true,
            }
        })
        .collect()
}

/// Lifts every valid pixel of `depth` into world coordinates, in row-major order.
///
/// `valid = None` treats every pixel as valid.
pub fn backproject(
    depth: &DepthMap,
    valid: Option<&[bool]>,
    pose: &CameraPose,
    k: &Intrinsics,
) -> Result<PointCloud> {
    if let Some(mask) = valid {
        if mask.len() != depth.data.len() {
            return Err(Error::InvalidInput("mask and depth sizes differ".into()));
        }
    }
    let inv_rot = pose.rotation.inverse();
    let mut points = Vec::new();
    for v in 0..depth.height {
        for u in 0..depth.width {
            let idx = v * depth.width + u;
            if valid.is_some_and(|m| !m[idx]) {
                continue;
            }
            let z = depth.data[idx];
            if !z.is_finite() {
                return Err(Error::InvalidInput(format!("non-finite depth at ({u}, {v})")));
            }
            let cam = k.ray(u as f64, v as f64) * z;
            points.push(inv_rot * (cam - pose.translation));
        }
    }
    Ok(PointCloud::new(points))
}

/// Least-squares similarity `dst ≈ s·R·src + t` (scale-inclusive Umeyama).
pub fn umeyama_align(src: &[Vec3], dst: &[Vec3]) -> Result<SimilarityTransform> {
    if src.len() != dst.len() {
        return Err(Error::InvalidInput(format!(
            "point counts differ: {} vs {}",
            src.len(),
            dst.len()
        )));
    }
    let n = src.len();
    if n < 3 {
        return Err(Error::Degenerate(format!("need at least 3 correspondences, got {n}")));
    }
    let inv_n = 1.0 / n as f64;
    let mu_src = src.iter().sum::<Vec3>() * inv_n;
    let mu_dst = dst.iter().sum::<Vec3>() * inv_n;

    let mut var_src = 0.0;
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        let sc = s - mu_src;
        let dc = d - mu_dst;
        var_src += sc.norm_squared();
        cov += dc * sc.transpose();
    }
    var_src *= inv_n;
    cov *= inv_n;
    if !(var_src > 0.0) || !var_src.is_finite() {
        return Err(Error::Degenerate("source points are coincident".into()));
    }

    let svd = SVD::new(cov, true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::Degenerate("SVD did not converge".into())),
    };
    let mut sv = svd.singular_values;
    // nalgebra does not guarantee ordering
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    if sv[order[1]] <= 1e-12 * sv[order[0]].max(f64::MIN_POSITIVE) {
        return Err(Error::Degenerate("correspondences are collinear".into()));
    }

    let mut d = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        d[(order[2], order[2])] = -1.0;
    }
    let rotation = u * d * v_t;
    for i in 0..3 {
        sv[i] *= d[(i, i)];
    }
    let scale = sv.sum() / var_src;
    let translation = mu_dst - scale * (rotation * mu_src);
    Ok(SimilarityTransform { scale, rotation, translation })
}
