//! Pinhole cameras, depth deprojection and rigid frame changes.
//!
//! Conventions: camera frames follow the OpenCV layout (x right, y down,
//! z forward). Extrinsics map camera coordinates into the robot base frame.

use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, Vector3};
use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rotations whose orthonormality error is below this are accepted as-is.
pub const ROTATION_TOLERANCE: f64 = 1e-6;
/// Loaders re-orthonormalize rotations that drifted at most this far.
pub const ROTATION_REPAIR_LIMIT: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Intrinsics for a square-pixel camera with the given horizontal field of view.
    pub fn from_fov(width: usize, height: usize, hfov_rad: f64) -> Self {
        let f = 0.5 * width as f64 / (0.5 * hfov_rad).tan();
        Self {
            fx: f,
            fy: f,
            cx: 0.5 * (width as f64 - 1.0),
            cy: 0.5 * (height as f64 - 1.0),
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "focal lengths must be finite and positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("image size must be nonzero".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx)
            || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(Error::InvalidInput(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Ray through pixel `(u, v)` in the camera frame, scaled so that z = 1.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// A proper rigid transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform, rejecting rotations that are not orthonormal
    /// with determinant +1 within [`ROTATION_TOLERANCE`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let err = orthonormality_error(&rotation);
        if !(err <= ROTATION_TOLERANCE) || rotation.determinant() <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "rotation is not proper orthonormal (error {err:.3e})"
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
        Self {
            rotation: *rot.matrix(),
            translation,
        }
    }

    /// Rotation by `angle` about the vertical line through `pivot` (base-frame z axis).
    pub fn about_vertical_axis(pivot: Vector3<f64>, angle: f64) -> Self {
        let rot = Self::from_axis_angle(Vector3::z(), angle, Vector3::zeros());
        Self::from_translation(pivot)
            .compose(&rot)
            .compose(&Self::from_translation(-pivot))
    }

    /// Camera-to-base extrinsic for a camera at `eye` looking at `target`,
    /// with image "up" as close to `up` as possible.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = (target - eye).try_normalize(1e-12).ok_or_else(|| {
            Error::InvalidInput("look_at eye and target coincide".into())
        })?;
        let right = forward.cross(&up).try_normalize(1e-9).ok_or_else(|| {
            Error::InvalidInput("look_at up vector is parallel to the view direction".into())
        })?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        Ok(Self {
            rotation,
            translation: eye,
        })
    }

    /// Parses a row-major homogeneous 4x4 matrix. Rotations that drifted by at
    /// most [`ROTATION_REPAIR_LIMIT`] are re-orthonormalized.
    pub fn from_row_major(m: &[f64; 16]) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("extrinsic matrix".into()));
        }
        let bottom = [m[12], m[13], m[14], m[15]];
        if bottom
            .iter()
            .zip([0.0, 0.0, 0.0, 1.0])
            .any(|(a, b)| (a - b).abs() > ROTATION_REPAIR_LIMIT)
        {
            return Err(Error::InvalidInput(format!(
                "homogeneous bottom row must be [0, 0, 0, 1], got {bottom:?}"
            )));
        }
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let translation = Vector3::new(m[3], m[7], m[11]);
        let err = orthonormality_error(&rotation);
        if err <= ROTATION_TOLERANCE && rotation.determinant() > 0.0 {
            return Ok(Self {
                rotation,
                translation,
            });
        }
        if err <= ROTATION_REPAIR_LIMIT && rotation.determinant() > 0.0 {
            return Ok(Self {
                rotation: polar_orthonormalize(&rotation),
                translation,
            });
        }
        Err(Error::InvalidInput(format!(
            "extrinsic rotation drift {err:.3e} exceeds repair limit {ROTATION_REPAIR_LIMIT:e}"
        )))
    }

    #[rustfmt::skip]
    pub fn to_row_major(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0],
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1],
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2],
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut h = Matrix4::identity();
        h.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        h.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        h
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        invert(self)
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }
}

/// Max absolute entry of `RᵀR − I`.
pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).amax()
}

/// Nearest rotation in the Frobenius sense (orthogonal polar factor).
fn polar_orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut q = u * v_t;
    if q.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        q = u * v_t;
    }
    q
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    let rt = t.rotation.transpose();
    RigidTransform {
        rotation: rt,
        translation: -(rt * t.translation),
    }
}

/// Applies `t` to every row of an `N×3` array.
pub fn transform_points(points: ArrayView2<f64>, t: &RigidTransform) -> Array2<f64> {
    let mut out = Array2::zeros((points.nrows(), 3));
    for (src, mut dst) in points.outer_iter().zip(out.outer_iter_mut()) {
        let p = t.apply(&Vector3::new(src[0], src[1], src[2]));
        dst[0] = p[0];
        dst[1] = p[1];
        dst[2] = p[2];
    }
    out
}

/// One camera's RGBD image together with its calibration.
#[derive(Debug, Clone)]
pub struct CameraFrame {
    /// `H×W×3`, values in `[0, 1]`.
    pub rgb: Array3<f64>,
    /// `H×W` metric depth; NaN, zero or negative marks a missing reading.
    pub depth: Array2<f64>,
    pub intrinsics: CameraIntrinsics,
    /// Camera → robot base.
    pub extrinsic: RigidTransform,
}

impl CameraFrame {
    pub fn height(&self) -> usize {
        self.depth.nrows()
    }

    pub fn width(&self) -> usize {
        self.depth.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let (h, w) = self.depth.dim();
        if self.rgb.dim() != (h, w, 3) {
            return Err(Error::dims(
                "rgb image",
                format!("{h}x{w}x3"),
                format!("{:?}", self.rgb.dim()),
            ));
        }
        if (self.intrinsics.height, self.intrinsics.width) != (h, w) {
            return Err(Error::dims(
                "intrinsics image size",
                format!("{h}x{w}"),
                format!("{}x{}", self.intrinsics.height, self.intrinsics.width),
            ));
        }
        if self.depth.iter().any(|d| d.is_infinite()) {
            return Err(Error::NonFinite("depth".into()));
        }
        Ok(())
    }
}

#[inline]
pub fn depth_is_valid(z: f64) -> bool {
    z.is_finite() && z > 0.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proprioception {
    /// End effector in the robot base frame.
    pub ee_pose: RigidTransform,
    pub gripper: f64,
}

impl Proprioception {
    /// Flat proprioceptive vector: EE position followed by gripper state.
    pub fn to_vector(&self) -> [f64; 4] {
        let t = self.ee_pose.translation;
        [t[0], t[1], t[2], self.gripper]
    }
}

/// Per-pixel 3D points in the camera frame plus a validity mask.
#[derive(Debug, Clone)]
pub struct PointMap {
    /// `H×W×3`. Masked pixels hold NaN.
    pub points: Array3<f64>,
    pub valid: Array2<bool>,
}

/// Inverse pinhole mapping of every pixel. Invalid depth pixels are masked,
/// never emitted as origin points.
pub fn deproject(frame: &CameraFrame) -> PointMap {
    let (h, w) = frame.depth.dim();
    let k = &frame.intrinsics;
    let mut points = Array3::from_elem((h, w, 3), f64::NAN);
    let mut valid = Array2::from_elem((h, w), false);
    for v in 0..h {
        for u in 0..w {
            let z = frame.depth[(v, u)];
            if !depth_is_valid(z) {
                continue;
            }
            points[(v, u, 0)] = (u as f64 - k.cx) * z / k.fx;
            points[(v, u, 1)] = (v as f64 - k.cy) * z / k.fy;
            points[(v, u, 2)] = z;
            valid[(v, u)] = true;
        }
    }
    PointMap { points, valid }
}

/// Per-camera calibration record, as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraCalibration {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Row-major 4×4 camera → base transform.
    pub extrinsic: [f64; 16],
}

impl CameraCalibration {
    pub fn new(intrinsics: &CameraIntrinsics, extrinsic: &RigidTransform) -> Self {
        Self {
            fx: intrinsics.fx,
            fy: intrinsics.fy,
            cx: intrinsics.cx,
            cy: intrinsics.cy,
            width: intrinsics.width,
            height: intrinsics.height,
            extrinsic: extrinsic.to_row_major(),
        }
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
    }

    pub fn extrinsic(&self) -> Result<RigidTransform> {
        RigidTransform::from_row_major(&self.extrinsic)
    }
}

/// Reads a JSON array of per-camera calibration records.
pub fn load_calibration(path: &Path) -> Result<Vec<CameraCalibration>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let calib: Vec<CameraCalibration> = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    for c in &calib {
        c.intrinsics()?;
        c.extrinsic()?;
    }
    Ok(calib)
}

pub fn save_calibration(path: &Path, calib: &[CameraCalibration]) -> Result<()> {
    let text = serde_json::to_string_pretty(calib).expect("calibration serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_transform(rng: &mut impl Rng) -> RigidTransform {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let t = Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        );
        RigidTransform::from_axis_angle(axis, rng.random_range(-3.0..3.0), t)
    }

    fn frame_with_depth(k: CameraIntrinsics, depth: Array2<f64>) -> CameraFrame {
        let (h, w) = depth.dim();
        CameraFrame {
            rgb: Array3::zeros((h, w, 3)),
            depth,
            intrinsics: k,
            extrinsic: RigidTransform::identity(),
        }
    }

    // Projection lives only in tests; the library never needs it.
    fn project(k: &CameraIntrinsics, p: &[f64]) -> (f64, f64) {
        (k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy)
    }

    #[test]
    fn principal_point_maps_to_optical_axis() {
        let k = CameraIntrinsics::new(80.0, 90.0, 3.0, 2.0, 8, 6).unwrap();
        let mut depth = Array2::from_elem((6, 8), f64::NAN);
        depth[(2, 3)] = 2.0;
        let pm = deproject(&frame_with_depth(k, depth));
        assert!(pm.valid[(2, 3)]);
        assert_eq!(
            [pm.points[(2, 3, 0)], pm.points[(2, 3, 1)], pm.points[(2, 3, 2)]],
            [0.0, 0.0, 2.0]
        );
    }

    #[test]
    fn pinhole_hand_evaluation() {
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 200, 100).unwrap();
        let mut depth = Array2::from_elem((100, 200), 1.0);
        depth[(50, 150)] = 1.0;
        let pm = deproject(&frame_with_depth(k, depth));
        assert_abs_diff_eq!(pm.points[(50, 150, 0)], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(pm.points[(50, 150, 1)], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(pm.points[(50, 150, 2)], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn invalid_depth_is_masked() {
        let k = CameraIntrinsics::new(10.0, 10.0, 1.0, 1.0, 3, 3).unwrap();
        let mut depth = Array2::from_elem((3, 3), 1.0);
        depth[(0, 0)] = f64::NAN;
        depth[(1, 2)] = 0.0;
        let pm = deproject(&frame_with_depth(k, depth));
        assert!(!pm.valid[(0, 0)]);
        assert!(!pm.valid[(1, 2)]);
        assert!(pm.points[(0, 0, 0)].is_nan());
        assert_eq!(pm.valid.iter().filter(|v| **v).count(), 7);
    }

    #[test]
    fn project_deproject_round_trip() {
        let k = CameraIntrinsics::new(120.0, 110.0, 31.5, 23.5, 64, 48).unwrap();
        let depth = Array2::from_shape_fn((48, 64), |(v, u)| 0.5 + 0.01 * (u + v) as f64);
        let pm = deproject(&frame_with_depth(k, depth));
        for v in 0..48 {
            for u in 0..64 {
                let p = [pm.points[(v, u, 0)], pm.points[(v, u, 1)], pm.points[(v, u, 2)]];
                let (pu, pv) = project(&k, &p);
                assert!((pu - u as f64).abs() < 1e-6 && (pv - v as f64).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 0.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 3.9, 3.9, 4, 4).is_ok());
    }

    #[test]
    fn transform_trivial_cases() {
        let pts = array![[0.0, 0.0, 0.0], [1.0, -2.0, 3.0]];
        assert_eq!(transform_points(pts.view(), &RigidTransform::identity()), pts);
        let shift = RigidTransform::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let out = transform_points(pts.view(), &shift);
        assert_eq!(out.row(0).to_vec(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn inverse_of_identity_and_translation() {
        assert_eq!(invert(&RigidTransform::identity()), RigidTransform::identity());
        let t = RigidTransform::from_translation(Vector3::new(0.5, -1.0, 2.0));
        assert_eq!(invert(&t).translation, Vector3::new(-0.5, 1.0, -2.0));
        assert_eq!(invert(&t).rotation, Matrix3::identity());
    }

    #[test]
    fn inverse_matches_homogeneous_matrix_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let t = random_transform(&mut rng);
            let oracle = t.to_homogeneous().try_inverse().unwrap();
            let inv = invert(&t).to_homogeneous();
            assert!((oracle - inv).amax() < 1e-9);
            let round = invert(&t).compose(&t);
            assert!((round.to_homogeneous() - Matrix4::identity()).amax() < 1e-9);

            let pts = Array2::from_shape_fn((10, 3), |_| rng.random_range(-5.0..5.0));
            let back = transform_points(transform_points(pts.view(), &t).view(), &invert(&t));
            assert!((&back - &pts).iter().all(|d| d.abs() < 1e-9));
        }
    }

    #[test]
    fn transforms_are_isometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = random_transform(&mut rng);
        let pts = Array2::from_shape_fn((16, 3), |_| rng.random_range(-3.0..3.0));
        let out = transform_points(pts.view(), &t);
        for i in 0..16 {
            for j in 0..16 {
                let d0 = (&pts.row(i) - &pts.row(j)).mapv(|v| v * v).sum().sqrt();
                let d1 = (&out.row(i) - &out.row(j)).mapv(|v| v * v).sum().sqrt();
                assert!((d0 - d1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn row_major_parse_repairs_small_drift_and_rejects_large() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_transform(&mut rng);
        let mut m = t.to_row_major();
        assert_eq!(RigidTransform::from_row_major(&m).unwrap(), t);

        m[0] += 5e-4;
        let repaired = RigidTransform::from_row_major(&m).unwrap();
        assert!(orthonormality_error(&repaired.rotation) < 1e-12);
        assert!((repaired.rotation - t.rotation).amax() < 1e-3);

        m[0] += 1e-2;
        assert!(RigidTransform::from_row_major(&m).is_err());
    }

    #[test]
    fn look_at_builds_proper_rotation() {
        let t = RigidTransform::look_at(
            Vector3::new(1.0, 1.0, 1.0),
            Vector3::zeros(),
            Vector3::z(),
        )
        .unwrap();
        assert!(orthonormality_error(&t.rotation) < 1e-12);
        assert!((t.rotation.determinant() - 1.0).abs() < 1e-12);
        let forward = t.apply_vector(&Vector3::z());
        assert!((forward + Vector3::new(1.0, 1.0, 1.0).normalize()).norm() < 1e-12);
    }

    #[test]
    fn calibration_json_is_strict() {
        let good = r#"[{"fx":100,"fy":100,"cx":31.5,"cy":31.5,"width":64,"height":64,
            "extrinsic":[1,0,0,0, 0,1,0,0, 0,0,1,0, 0,0,0,1]}]"#;
        let parsed: Vec<CameraCalibration> = serde_json::from_str(good).unwrap();
        assert_eq!(parsed[0].extrinsic().unwrap(), RigidTransform::identity());
        let extra = good.replace("\"fx\"", "\"skew\":0,\"fx\"");
        assert!(serde_json::from_str::<Vec<CameraCalibration>>(&extra).is_err());
    }
}
