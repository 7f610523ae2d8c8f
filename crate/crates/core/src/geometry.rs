//! Core 3D types: rigid and similarity transforms, rays, oriented boxes and
//! the pinhole camera model.
//!
//! Conventions: right-handed frames, the camera looks down `+z`, pixel origin
//! top-left, angles in radians. A `RigidTransform` named `T_a_b` maps
//! coordinates expressed in frame `b` into frame `a`.

use nalgebra::{Matrix3, Point2, Unit, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point3 = nalgebra::Point3<f64>;
pub type Vec3 = Vector3<f64>;
pub type Pixel = Point2<f64>;

/// Depth below which a point is treated as lying on or behind the image plane.
pub const MIN_DEPTH: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind camera (z = {0})")]
    BehindCamera(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid box: half extents must be positive, got {0:?}")]
    InvalidBox([f64; 3]),
    #[error("similarity scale must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("ray direction has zero length")]
    ZeroDirection,
}

/// A proper rigid motion `p -> R p + t`. Serializes as a [`PoseRecord`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "PoseRecord", try_from = "PoseRecord")]
pub struct RigidTransform {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        let mut rotation = rotation;
        rotation.renormalize();
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    pub fn from_rotation(rotation: UnitQuaternion<f64>) -> Self {
        Self::new(rotation, Vec3::zeros())
    }

    /// Builds a transform from raw quaternion components `(w, x, y, z)`.
    pub fn from_parts(q_wxyz: [f64; 4], translation: [f64; 3]) -> Result<Self, GeometryError> {
        if q_wxyz.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite("rigid transform"));
        }
        let q = nalgebra::Quaternion::new(q_wxyz[0], q_wxyz[1], q_wxyz[2], q_wxyz[3]);
        if q.norm() < 1e-12 {
            return Err(GeometryError::NonFinite("rigid transform quaternion"));
        }
        // already-unit input is kept bit-exact so records round-trip
        let rotation = if (q.norm() - 1.0).abs() <= 1e-12 {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::from_quaternion(q)
        };
        Ok(Self::new(rotation, Vec3::from(translation)))
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let mut rotation = self.rotation * other.rotation;
        rotation.renormalize();
        RigidTransform {
            rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rotation = self.rotation.inverse();
        RigidTransform {
            rotation,
            translation: -(rotation * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Minimal-parameter increment: axis-angle `(wx, wy, wz)` followed by a
    /// translation `(vx, vy, vz)`.
    pub fn from_increment(delta: &Vector6<f64>) -> RigidTransform {
        let omega = Vec3::new(delta[0], delta[1], delta[2]);
        RigidTransform::new(
            UnitQuaternion::from_scaled_axis(omega),
            Vec3::new(delta[3], delta[4], delta[5]),
        )
    }

    /// Inverse of [`RigidTransform::from_increment`].
    pub fn to_increment(&self) -> Vector6<f64> {
        let w = self.rotation.scaled_axis();
        Vector6::new(
            w.x,
            w.y,
            w.z,
            self.translation.x,
            self.translation.y,
            self.translation.z,
        )
    }

    /// Right-perturbation update `self ∘ Exp(delta)`.
    pub fn retract(&self, delta: &Vector6<f64>) -> RigidTransform {
        self.compose(&RigidTransform::from_increment(delta))
    }

    /// Rotation angle of the relative rotation between two transforms.
    pub fn rotation_angle_to(&self, other: &RigidTransform) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite())
            && self.rotation.coords.iter().all(|v| v.is_finite())
    }
}

/// `p -> s R p + t`. Serializes as a [`SimilarityRecord`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "SimilarityRecord", try_from = "SimilarityRecord")]
pub struct SimilarityTransform {
    scale: f64,
    pub rigid: RigidTransform,
}

impl SimilarityTransform {
    pub fn new(scale: f64, rigid: RigidTransform) -> Result<Self, GeometryError> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(GeometryError::InvalidScale(scale));
        }
        Ok(Self { scale, rigid })
    }

    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rigid: RigidTransform::identity(),
        }
    }

    pub fn from_rigid(rigid: RigidTransform) -> Self {
        Self { scale: 1.0, rigid }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn transform_point(&self, p: &Point3) -> Point3 {
        Point3::from(self.rigid.rotation * (self.scale * p.coords) + self.rigid.translation)
    }

    pub fn inverse_transform_point(&self, p: &Point3) -> Point3 {
        let local = self.rigid.rotation.inverse() * (p.coords - self.rigid.translation);
        Point3::from(local / self.scale)
    }

    pub fn inverse(&self) -> SimilarityTransform {
        let rotation = self.rigid.rotation.inverse();
        SimilarityTransform {
            scale: 1.0 / self.scale,
            rigid: RigidTransform::new(
                rotation,
                -(rotation * self.rigid.translation) / self.scale,
            ),
        }
    }

    pub fn compose(&self, other: &SimilarityTransform) -> SimilarityTransform {
        SimilarityTransform {
            scale: self.scale * other.scale,
            rigid: RigidTransform::new(
                self.rigid.rotation * other.rigid.rotation,
                self.rigid.rotation * (self.scale * other.rigid.translation)
                    + self.rigid.translation,
            ),
        }
    }

    /// Maps a pose `T_src_obj` into `T_dst_obj`, scaling its translation.
    pub fn transform_pose(&self, pose: &RigidTransform) -> RigidTransform {
        RigidTransform::new(
            self.rigid.rotation * pose.rotation,
            self.transform_point(&Point3::from(pose.translation)).coords,
        )
    }
}

/// Half-line `origin + t * direction`, `t >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Point3,
    pub direction: Unit<Vec3>,
}

impl Ray {
    pub fn new(origin: Point3, direction: Vec3) -> Result<Self, GeometryError> {
        let direction =
            Unit::try_new(direction, 1e-15).ok_or(GeometryError::ZeroDirection)?;
        Ok(Self { origin, direction })
    }

    pub fn through(origin: Point3, target: &Point3) -> Result<Self, GeometryError> {
        Self::new(origin, target - origin)
    }

    pub fn at(&self, t: f64) -> Point3 {
        self.origin + self.direction.into_inner() * t
    }

    pub fn transformed(&self, t: &RigidTransform) -> Ray {
        Ray {
            origin: t.transform_point(&self.origin),
            direction: Unit::new_unchecked(t.rotation * self.direction.into_inner()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox3 {
    pub center: Point3,
    half_extents: Vec3,
    pub rotation: UnitQuaternion<f64>,
}

impl OrientedBox3 {
    pub fn new(
        center: Point3,
        half_extents: Vec3,
        rotation: UnitQuaternion<f64>,
    ) -> Result<Self, GeometryError> {
        if half_extents.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
            return Err(GeometryError::InvalidBox([
                half_extents.x,
                half_extents.y,
                half_extents.z,
            ]));
        }
        if !center.coords.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("box center"));
        }
        Ok(Self {
            center,
            half_extents,
            rotation,
        })
    }

    pub fn axis_aligned(center: Point3, half_extents: Vec3) -> Result<Self, GeometryError> {
        Self::new(center, half_extents, UnitQuaternion::identity())
    }

    pub fn half_extents(&self) -> Vec3 {
        self.half_extents
    }

    pub fn volume(&self) -> f64 {
        8.0 * self.half_extents.product()
    }

    /// Corners `center + R (sx hx, sy hy, sz hz)`, with corner `i` taking
    /// `sx = -1` when bit 0 of `i` is clear, `sy` from bit 1 and `sz` from
    /// bit 2. Corner 0 is `(-,-,-)`, corner 7 is `(+,+,+)`.
    pub fn corners(&self) -> [Point3; 8] {
        let h = self.half_extents;
        std::array::from_fn(|i| {
            let sign = |bit: usize| if i & (1 << bit) != 0 { 1.0 } else { -1.0 };
            let local = Vec3::new(sign(0) * h.x, sign(1) * h.y, sign(2) * h.z);
            self.center + self.rotation * local
        })
    }

    pub fn contains(&self, p: &Point3) -> bool {
        let local = self.rotation.inverse() * (p - self.center);
        local.x.abs() <= self.half_extents.x
            && local.y.abs() <= self.half_extents.y
            && local.z.abs() <= self.half_extents.z
    }

    /// Axis-aligned `(min, max)` hull of the corners.
    pub fn aabb(&self) -> (Point3, Point3) {
        let corners = self.corners();
        let mut lo = corners[0];
        let mut hi = corners[0];
        for c in &corners[1..] {
            lo = lo.inf(c);
            hi = hi.sup(c);
        }
        (lo, hi)
    }

    pub fn transformed(&self, t: &RigidTransform) -> OrientedBox3 {
        OrientedBox3 {
            center: t.transform_point(&self.center),
            half_extents: self.half_extents,
            rotation: t.rotation * self.rotation,
        }
    }

    pub fn transformed_similarity(&self, s: &SimilarityTransform) -> OrientedBox3 {
        OrientedBox3 {
            center: s.transform_point(&self.center),
            half_extents: self.half_extents * s.scale(),
            rotation: s.rigid.rotation * self.rotation,
        }
    }
}

/// Free function form of [`OrientedBox3::corners`].
pub fn box_corners(b: &OrientedBox3) -> [Point3; 8] {
    b.corners()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
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

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "cx={} outside [0, {})",
                self.cx, self.width
            )));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "cy={} outside [0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }

    pub fn project(&self, p_cam: &Point3) -> Result<Pixel, GeometryError> {
        if p_cam.z <= MIN_DEPTH {
            return Err(GeometryError::BehindCamera(p_cam.z));
        }
        Ok(Pixel::new(
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        ))
    }

    /// Point at camera depth `z` along the pixel's viewing ray.
    pub fn back_project(&self, px: &Pixel, z: f64) -> Point3 {
        Point3::new(
            (px.x - self.cx) / self.fx * z,
            (px.y - self.cy) / self.fy * z,
            z,
        )
    }

    /// Unit viewing direction in the camera frame.
    pub fn pixel_direction(&self, px: &Pixel) -> Vec3 {
        self.back_project(px, 1.0).coords.normalize()
    }

    pub fn in_image(&self, px: &Pixel) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }
}

pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

pub fn project(k: &CameraIntrinsics, p_cam: &Point3) -> Result<Pixel, GeometryError> {
    k.project(p_cam)
}

/// Skew-symmetric cross-product matrix `[v]x`.
pub fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation whose `+z` axis points from `eye` towards `target`, with image
/// `-y` as close as possible to `up`. Returns `T_world_camera`.
pub fn look_at(eye: &Point3, target: &Point3, up: &Vec3) -> RigidTransform {
    let z = (target - eye).normalize();
    let mut x = z.cross(up);
    if x.norm() < 1e-9 {
        x = z.cross(&Vec3::x());
    }
    let x = x.normalize();
    let y = z.cross(&x);
    let m = Matrix3::from_columns(&[x, y, z]);
    let rotation =
        UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(m));
    RigidTransform::new(rotation, eye.coords)
}

/// Serializable `(translation, quaternion xyzw)` pose record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub t: [f64; 3],
    /// Quaternion as `[x, y, z, w]`.
    pub q: [f64; 4],
}

impl From<&RigidTransform> for PoseRecord {
    fn from(t: &RigidTransform) -> Self {
        let c = t.rotation.coords;
        PoseRecord {
            t: [t.translation.x, t.translation.y, t.translation.z],
            q: [c.x, c.y, c.z, c.w],
        }
    }
}

impl TryFrom<&PoseRecord> for RigidTransform {
    type Error = GeometryError;

    fn try_from(r: &PoseRecord) -> Result<Self, Self::Error> {
        RigidTransform::from_parts([r.q[3], r.q[0], r.q[1], r.q[2]], r.t)
    }
}

impl From<RigidTransform> for PoseRecord {
    fn from(t: RigidTransform) -> Self {
        PoseRecord::from(&t)
    }
}

impl TryFrom<PoseRecord> for RigidTransform {
    type Error = GeometryError;

    fn try_from(r: PoseRecord) -> Result<Self, Self::Error> {
        RigidTransform::try_from(&r)
    }
}

/// Serializable `(scale, translation, quaternion xyzw)` record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilarityRecord {
    pub scale: f64,
    pub t: [f64; 3],
    /// Quaternion as `[x, y, z, w]`.
    pub q: [f64; 4],
}

impl From<SimilarityTransform> for SimilarityRecord {
    fn from(s: SimilarityTransform) -> Self {
        let r = PoseRecord::from(&s.rigid);
        SimilarityRecord {
            scale: s.scale,
            t: r.t,
            q: r.q,
        }
    }
}

impl TryFrom<SimilarityRecord> for SimilarityTransform {
    type Error = GeometryError;

    fn try_from(r: SimilarityRecord) -> Result<Self, Self::Error> {
        let rigid = RigidTransform::try_from(PoseRecord { t: r.t, q: r.q })?;
        SimilarityTransform::new(r.scale, rigid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_transform(rng: &mut impl Rng) -> RigidTransform {
        let axis = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let t = Vec3::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
        );
        RigidTransform::new(UnitQuaternion::from_scaled_axis(axis * 2.0), t)
    }

    fn random_point(rng: &mut impl Rng) -> Point3 {
        Point3::new(
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
        )
    }

    fn assert_close_transform(a: &RigidTransform, b: &RigidTransform, tol: f64) {
        assert!((a.translation - b.translation).amax() < tol);
        assert!(a.rotation_angle_to(b) < tol);
    }

    #[test]
    fn compose_identity_and_inverse() {
        let id = RigidTransform::identity();
        assert_eq!(id.compose(&id), id);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_transform(&mut rng);
        assert_close_transform(&t.compose(&t.inverse()), &id, 1e-9);
    }

    #[test]
    fn compose_matches_pointwise_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_transform(&mut rng);
        let b = random_transform(&mut rng);
        let ab = a.compose(&b);
        let mut max_dev: f64 = 0.0;
        for _ in 0..100 {
            let p = random_point(&mut rng);
            let expected = a.transform_point(&b.transform_point(&p));
            max_dev = max_dev.max((ab.transform_point(&p) - expected).norm());
        }
        assert!(max_dev < 1e-9, "max deviation {max_dev}");
        assert!((ab.rotation.quaternion().norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn transform_point_examples() {
        let p = Point3::new(1.0, 2.0, 3.0);
        assert_eq!(RigidTransform::identity().transform_point(&p), p);
        let shift = RigidTransform::from_translation(Vec3::new(0.0, 0.0, 1.0));
        assert_eq!(shift.transform_point(&Point3::origin()), Point3::new(0.0, 0.0, 1.0));
        let s = SimilarityTransform::new(2.0, RigidTransform::identity()).unwrap();
        assert_eq!(
            s.transform_point(&Point3::new(1.0, 1.0, 1.0)),
            Point3::new(2.0, 2.0, 2.0)
        );
    }

    #[test]
    fn project_examples() {
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        assert_eq!(k.project(&Point3::new(0.0, 0.0, 1.0)).unwrap(), Pixel::new(50.0, 50.0));
        assert_eq!(k.project(&Point3::new(1.0, 0.0, 2.0)).unwrap(), Pixel::new(100.0, 50.0));
        assert!(matches!(
            k.project(&Point3::new(0.0, 0.0, 0.0)),
            Err(GeometryError::BehindCamera(_))
        ));
        assert!(k.project(&Point3::new(0.0, 0.0, -1.0)).is_err());
    }

    #[test]
    fn projection_round_trip() {
        let k = CameraIntrinsics::new(812.5, 790.0, 640.0, 360.0, 1280, 720).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let px = Pixel::new(rng.random_range(0.0..1280.0), rng.random_range(0.0..720.0));
            let z = rng.random_range(0.1..50.0);
            let back = k.project(&k.back_project(&px, z)).unwrap();
            assert!((back - px).norm() < 1e-9);
        }
    }

    #[test]
    fn invalid_intrinsics_rejected() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 10, 10).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 10.0, 1.0, 10, 10).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 1.0, -1.0, 10, 10).is_err());
    }

    #[test]
    fn box_corner_examples() {
        let b = OrientedBox3::axis_aligned(Point3::origin(), Vec3::repeat(0.5)).unwrap();
        let corners = b.corners();
        assert_eq!(corners[0], Point3::new(-0.5, -0.5, -0.5));
        assert_eq!(corners[7], Point3::new(0.5, 0.5, 0.5));
        for c in &corners {
            assert!(c.coords.iter().all(|v| v.abs() == 0.5));
        }
        let rotated = OrientedBox3::new(
            Point3::origin(),
            Vec3::repeat(0.5),
            UnitQuaternion::from_axis_angle(&Vec3::z_axis(), std::f64::consts::FRAC_PI_2),
        )
        .unwrap();
        let c7 = rotated.corners()[7];
        assert!((c7 - Point3::new(-0.5, 0.5, 0.5)).norm() < 1e-12);
        assert!(OrientedBox3::axis_aligned(Point3::origin(), Vec3::new(1.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn box_corners_satisfy_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let t = random_transform(&mut rng);
            let h = Vec3::new(
                rng.random_range(0.1..3.0),
                rng.random_range(0.1..3.0),
                rng.random_range(0.1..3.0),
            );
            let b = OrientedBox3::new(Point3::from(t.translation), h, t.rotation).unwrap();
            for c in b.corners() {
                let local = b.rotation.inverse() * (c - b.center);
                assert!((local.abs() - h).amax() < 1e-9);
            }
        }
    }

    #[test]
    fn look_at_faces_target() {
        let eye = Point3::new(3.0, -2.0, 1.5);
        let target = Point3::new(0.0, 0.0, 0.5);
        let t_wc = look_at(&eye, &target, &Vec3::z());
        let in_cam = t_wc.inverse().transform_point(&target);
        assert!(in_cam.x.abs() < 1e-12 && in_cam.y.abs() < 1e-12 && in_cam.z > 0.0);
        // image "up" (-y) points to world +z as closely as possible
        let up_world = t_wc.transform_vector(&-Vec3::y());
        assert!(up_world.z > 0.9);
    }

    fn arb_transform() -> impl Strategy<Value = RigidTransform> {
        (prop::array::uniform3(-3.0..3.0f64), prop::array::uniform3(-10.0..10.0f64)).prop_map(
            |(w, t)| {
                RigidTransform::new(UnitQuaternion::from_scaled_axis(Vec3::from(w)), Vec3::from(t))
            },
        )
    }

    fn arb_point() -> impl Strategy<Value = Point3> {
        prop::array::uniform3(-10.0..10.0f64).prop_map(|p| Point3::from(Vec3::from(p)))
    }

    proptest! {
        #[test]
        fn compose_is_associative(a in arb_transform(), b in arb_transform(), c in arb_transform()) {
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            prop_assert!((left.translation - right.translation).amax() < 1e-9);
            prop_assert!(left.rotation_angle_to(&right) < 1e-9);
        }

        #[test]
        fn inverse_of_composition(a in arb_transform(), b in arb_transform()) {
            let lhs = a.compose(&b).inverse();
            let rhs = b.inverse().compose(&a.inverse());
            prop_assert!((lhs.translation - rhs.translation).amax() < 1e-9);
            prop_assert!((lhs.rotation.coords - rhs.rotation.coords).amax() < 1e-9
                || (lhs.rotation.coords + rhs.rotation.coords).amax() < 1e-9);
            prop_assert!((lhs.rotation.quaternion().norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn transform_distributes_over_compose(a in arb_transform(), b in arb_transform(), p in arb_point()) {
            let lhs = a.transform_point(&b.transform_point(&p));
            let rhs = a.compose(&b).transform_point(&p);
            prop_assert!((lhs - rhs).norm() < 1e-9);
        }

        #[test]
        fn similarity_scales_distances(t in arb_transform(), s in 0.01..100.0f64, p in arb_point(), q in arb_point()) {
            let sim = SimilarityTransform::new(s, t).unwrap();
            let d = (sim.transform_point(&p) - sim.transform_point(&q)).norm();
            prop_assert!((d - s * (p - q).norm()).abs() < 1e-9 * (1.0 + d));
            let back = sim.inverse_transform_point(&sim.transform_point(&p));
            prop_assert!((back - p).norm() < 1e-9);
            let back2 = sim.inverse().transform_point(&sim.transform_point(&p));
            prop_assert!((back2 - p).norm() < 1e-9);
        }

        #[test]
        fn box_volume_rotation_invariant(t in arb_transform(), h in prop::array::uniform3(0.01..4.0f64)) {
            let b = OrientedBox3::axis_aligned(Point3::origin(), Vec3::from(h)).unwrap();
            let moved = b.transformed(&t);
            prop_assert!((moved.volume() - 8.0 * h[0] * h[1] * h[2]).abs() < 1e-12);
        }
    }
}
