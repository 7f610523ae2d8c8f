//! Analytic latent-code shape decoder.
//!
//! A [`ShapeCode`] holds five numbers `(a, b, c, e1, e2)`: the half-axes of a
//! superellipsoid and its horizontal/vertical shape exponents. The family
//! spans box-like (`e -> 0.2`), ellipsoidal (`e = 1`) and pinched (`e -> 2`)
//! shapes, all convex and star-shaped about the origin.
//!
//! The inside-outside function used here is
//!
//! ```text
//! F(p) = (|x/a|^(2/e1) + |y/b|^(2/e1))^(e1/e2) + |z/c|^(2/e2)
//! ```
//!
//! which is homogeneous of degree `2/e2`. The boundary point along the ray
//! through `p` is therefore `p * F(p)^(-e2/2)` and the value returned by
//! [`sdf_eval`] is the radial distance `|p| (1 - F(p)^(-e2/2))`: exact for
//! spheres, a first-order approximation of the Euclidean distance elsewhere.

use crate::geometry::{OrientedBox3, Point3, RigidTransform, Vec3};
use nalgebra::SVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CODE_DIM: usize = 5;
pub type CodeVector = SVector<f64, CODE_DIM>;

pub const AXIS_MIN: f64 = 0.05;
pub const AXIS_MAX: f64 = 5.0;
pub const EXPONENT_MIN: f64 = 0.2;
pub const EXPONENT_MAX: f64 = 2.0;

/// Smallest resolution accepted by [`extract_mesh_points`].
pub const MIN_MESH_RESOLUTION: usize = 16;
/// Fewer extracted points than this means the shape is degenerate.
pub const MIN_MESH_POINTS: usize = 100;

const CODE_NAMES: [&str; CODE_DIM] = ["a", "b", "c", "e1", "e2"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdfError {
    #[error("shape code component {name} = {value} outside [{lo}, {hi}]")]
    CodeOutOfBounds {
        name: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("mesh resolution {0} below minimum {MIN_MESH_RESOLUTION}")]
    ResolutionTooLow(usize),
    #[error("degenerate shape: only {0} surface points extracted")]
    DegenerateShape(usize),
}

/// Latent shape vector `z = (a, b, c, e1, e2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; CODE_DIM]", into = "[f64; CODE_DIM]")]
pub struct ShapeCode {
    z: [f64; CODE_DIM],
}

impl ShapeCode {
    pub fn new(a: f64, b: f64, c: f64, e1: f64, e2: f64) -> Result<Self, SdfError> {
        Self::from_array([a, b, c, e1, e2])
    }

    pub fn from_array(z: [f64; CODE_DIM]) -> Result<Self, SdfError> {
        let (lo, hi) = (Self::lower_bounds(), Self::upper_bounds());
        for i in 0..CODE_DIM {
            if !(z[i] >= lo[i] && z[i] <= hi[i]) {
                return Err(SdfError::CodeOutOfBounds {
                    name: CODE_NAMES[i],
                    value: z[i],
                    lo: lo[i],
                    hi: hi[i],
                });
            }
        }
        Ok(Self { z })
    }

    /// Projects an arbitrary vector onto the admissible box.
    pub fn clamped(z: [f64; CODE_DIM]) -> Self {
        let (lo, hi) = (Self::lower_bounds(), Self::upper_bounds());
        Self {
            z: std::array::from_fn(|i| {
                if z[i].is_nan() {
                    0.5 * (lo[i] + hi[i])
                } else {
                    z[i].clamp(lo[i], hi[i])
                }
            }),
        }
    }

    pub fn sphere(radius: f64) -> Result<Self, SdfError> {
        Self::new(radius, radius, radius, 1.0, 1.0)
    }

    /// The code at the center of its bounds.
    pub fn centered() -> Self {
        let (lo, hi) = (Self::lower_bounds(), Self::upper_bounds());
        Self {
            z: std::array::from_fn(|i| 0.5 * (lo[i] + hi[i])),
        }
    }

    pub fn lower_bounds() -> [f64; CODE_DIM] {
        [AXIS_MIN, AXIS_MIN, AXIS_MIN, EXPONENT_MIN, EXPONENT_MIN]
    }

    pub fn upper_bounds() -> [f64; CODE_DIM] {
        [AXIS_MAX, AXIS_MAX, AXIS_MAX, EXPONENT_MAX, EXPONENT_MAX]
    }

    pub fn as_array(&self) -> [f64; CODE_DIM] {
        self.z
    }

    pub fn as_vector(&self) -> CodeVector {
        CodeVector::from(self.z)
    }

    pub fn half_axes(&self) -> Vec3 {
        Vec3::new(self.z[0], self.z[1], self.z[2])
    }

    pub fn max_axis(&self) -> f64 {
        self.z[0].max(self.z[1]).max(self.z[2])
    }

    pub fn exponents(&self) -> (f64, f64) {
        (self.z[3], self.z[4])
    }

    /// Each component mapped affinely from its bounds onto `[-1, 1]`.
    pub fn normalized(&self) -> CodeVector {
        let (lo, hi) = (Self::lower_bounds(), Self::upper_bounds());
        CodeVector::from_fn(|i, _| 2.0 * (self.z[i] - lo[i]) / (hi[i] - lo[i]) - 1.0)
    }

    /// Derivative of each normalized component with respect to its raw value.
    pub fn normalization_slope() -> CodeVector {
        let (lo, hi) = (Self::lower_bounds(), Self::upper_bounds());
        CodeVector::from_fn(|i, _| 2.0 / (hi[i] - lo[i]))
    }

    pub fn with_scaled_axes(&self, k: f64) -> Self {
        let mut z = self.z;
        for v in &mut z[..3] {
            *v *= k;
        }
        Self::clamped(z)
    }
}

impl TryFrom<[f64; CODE_DIM]> for ShapeCode {
    type Error = SdfError;

    fn try_from(z: [f64; CODE_DIM]) -> Result<Self, Self::Error> {
        Self::from_array(z)
    }
}

impl From<ShapeCode> for [f64; CODE_DIM] {
    fn from(c: ShapeCode) -> Self {
        c.z
    }
}

/// Signed distance with its gradients at one query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdfSample {
    pub point: Point3,
    pub value: f64,
    pub gradient_point: Vec3,
    pub gradient_code: CodeVector,
}

fn inside_outside(z: &[f64; CODE_DIM], p: &Vec3) -> f64 {
    let [a, b, c, e1, e2] = *z;
    let xy = (p.x / a).abs().powf(2.0 / e1) + (p.y / b).abs().powf(2.0 / e1);
    xy.powf(e1 / e2) + (p.z / c).abs().powf(2.0 / e2)
}

/// Radial distance from the origin to the boundary along unit direction `u`.
fn boundary_radius(z: &[f64; CODE_DIM], u: &Vec3) -> f64 {
    inside_outside(z, u).powf(-0.5 * z[4])
}

/// Evaluation without bound checks; finite differences step slightly past
/// the bounds.
fn sdf_raw(z: &[f64; CODE_DIM], p: &Vec3) -> f64 {
    let r = p.norm();
    if r < 1e-12 {
        return -z[0].min(z[1]).min(z[2]);
    }
    r - boundary_radius(z, &(p / r))
}

/// Inside-outside indicator: `F(p) < 1` strictly inside, `> 1` outside.
pub fn inside_outside_value(code: &ShapeCode, p: &Point3) -> f64 {
    inside_outside(&code.z, &p.coords)
}

/// Pseudo signed distance of an object-frame point. Negative inside.
pub fn sdf_eval(code: &ShapeCode, p: &Point3) -> f64 {
    sdf_raw(&code.z, &p.coords)
}

/// Checked variant of [`sdf_eval`] for raw code vectors.
pub fn sdf_eval_checked(z: [f64; CODE_DIM], p: &Point3) -> Result<f64, SdfError> {
    let code = ShapeCode::from_array(z)?;
    Ok(sdf_eval(&code, p))
}

fn fd_step(x: f64, rel: f64) -> f64 {
    rel * x.abs().max(1.0)
}

/// Central-difference gradients with relative step `rel`.
pub fn sdf_gradient_with_step(code: &ShapeCode, p: &Point3, rel: f64) -> (Vec3, CodeVector) {
    let z = code.z;
    let mut grad_p = Vec3::zeros();
    for i in 0..3 {
        let h = fd_step(p[i], rel);
        let mut lo = p.coords;
        let mut hi = p.coords;
        lo[i] -= h;
        hi[i] += h;
        grad_p[i] = (sdf_raw(&z, &hi) - sdf_raw(&z, &lo)) / (2.0 * h);
    }
    let mut grad_z = CodeVector::zeros();
    for i in 0..CODE_DIM {
        let h = fd_step(z[i], rel);
        let mut lo = z;
        let mut hi = z;
        lo[i] -= h;
        hi[i] += h;
        grad_z[i] = (sdf_raw(&hi, &p.coords) - sdf_raw(&lo, &p.coords)) / (2.0 * h);
    }
    (grad_p, grad_z)
}

/// Gradients with respect to the query point and the code, by central
/// differences with step `1e-5 * max(1, |coordinate|)`.
pub fn sdf_gradient(code: &ShapeCode, p: &Point3) -> (Vec3, CodeVector) {
    sdf_gradient_with_step(code, p, 1e-5)
}

pub fn sdf_sample(code: &ShapeCode, p: &Point3) -> SdfSample {
    let (gradient_point, gradient_code) = sdf_gradient(code, p);
    SdfSample {
        point: *p,
        value: sdf_eval(code, p),
        gradient_point,
        gradient_code,
    }
}

/// Outward unit normal (normalized point gradient).
pub fn surface_normal(code: &ShapeCode, p: &Point3) -> Vec3 {
    let (g, _) = sdf_gradient(code, p);
    let n = g.norm();
    if n > 0.0 {
        g / n
    } else {
        Vec3::z()
    }
}

/// `n` near-uniform unit directions on a Fibonacci lattice.
pub fn fibonacci_directions(n: usize) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            Vec3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// Bisection on the sdf along `u` from the centroid.
fn cast_from_center(z: &[f64; CODE_DIM], u: &Vec3, t_max: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, t_max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if sdf_raw(z, &(u * mid)) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Points on the zero level set, found by casting `resolution²` rays from
/// the centroid along Fibonacci-lattice directions. Output order follows the
/// direction index and is deterministic.
pub fn extract_mesh_points(code: &ShapeCode, resolution: usize) -> Result<Vec<Point3>, SdfError> {
    if resolution < MIN_MESH_RESOLUTION {
        return Err(SdfError::ResolutionTooLow(resolution));
    }
    let z = code.z;
    let h = code.half_axes();
    // every exponent in range keeps the shape inside its (a, b, c) box
    let t_max = 1.01 * h.norm();
    let tol = 1e-3 * code.max_axis();
    let points: Vec<Point3> = fibonacci_directions(resolution * resolution)
        .par_iter()
        .map(|u| Point3::from(u * cast_from_center(&z, u, t_max)))
        .collect::<Vec<_>>()
        .into_iter()
        .filter(|p| p.coords.iter().all(|v| v.is_finite()) && sdf_raw(&z, &p.coords).abs() < tol)
        .collect();
    if points.len() < MIN_MESH_POINTS {
        return Err(SdfError::DegenerateShape(points.len()));
    }
    Ok(points)
}

/// Object-frame box with half-extents `(a, b, c)`, carried by `pose`
/// (`T_world_object`).
pub fn tight_bounding_box(code: &ShapeCode, pose: &RigidTransform) -> OrientedBox3 {
    OrientedBox3::new(
        Point3::from(pose.translation),
        code.half_axes(),
        pose.rotation,
    )
    .expect("shape code half-axes are positive")
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_code(rng: &mut impl Rng) -> ShapeCode {
        ShapeCode::new(
            rng.random_range(0.3..3.0),
            rng.random_range(0.3..3.0),
            rng.random_range(0.3..3.0),
            rng.random_range(EXPONENT_MIN..EXPONENT_MAX),
            rng.random_range(EXPONENT_MIN..EXPONENT_MAX),
        )
        .unwrap()
    }

    fn random_point(rng: &mut impl Rng, extent: f64) -> Point3 {
        Point3::new(
            rng.random_range(-extent..extent),
            rng.random_range(-extent..extent),
            rng.random_range(-extent..extent),
        )
    }

    #[test]
    fn sphere_values_are_exact() {
        let s = ShapeCode::sphere(1.0).unwrap();
        assert_eq!(sdf_eval(&s, &Point3::origin()), -1.0);
        assert!((sdf_eval(&s, &Point3::new(2.0, 0.0, 0.0)) - 1.0).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let p = random_point(&mut rng, 3.0);
            assert!((sdf_eval(&s, &p) - (p.coords.norm() - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn box_like_near_face_matches_dense_boundary_oracle() {
        let code = ShapeCode::new(1.0, 1.0, 1.0, 0.2, 0.2).unwrap();
        let p = Point3::new(0.999, 0.0, 0.0);
        let value = sdf_eval(&code, &p);
        // oracle: nearest of 10^6 boundary points found by independent
        // per-direction bisection on the inside-outside function
        let dirs = fibonacci_directions(1_000_000);
        let nearest = dirs
            .par_iter()
            .map(|u| {
                let (mut lo, mut hi) = (0.0, 2.0);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if inside_outside_value(&code, &Point3::from(u * mid)) < 1.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                (Point3::from(u * lo) - p).norm()
            })
            .reduce(|| f64::INFINITY, f64::min);
        assert!(value < 0.0);
        assert!(value.abs() < 0.02);
        assert!((value.abs() - nearest).abs() < 2e-3, "sdf {value} oracle {nearest}");
    }

    #[test]
    fn out_of_bounds_code_rejected() {
        assert!(ShapeCode::new(0.01, 1.0, 1.0, 1.0, 1.0).is_err());
        assert!(ShapeCode::new(1.0, 1.0, 1.0, 2.5, 1.0).is_err());
        assert!(ShapeCode::new(1.0, 1.0, f64::NAN, 1.0, 1.0).is_err());
        assert!(matches!(
            sdf_eval_checked([1.0, 1.0, 6.0, 1.0, 1.0], &Point3::origin()),
            Err(SdfError::CodeOutOfBounds { name: "c", .. })
        ));
        let c: Result<ShapeCode, _> = serde_json::from_str("[1.0, 1.0, 1.0, 0.1, 1.0]");
        assert!(c.is_err());
    }

    #[test]
    fn sphere_gradients() {
        let s = ShapeCode::sphere(1.0).unwrap();
        let (gp, gz) = sdf_gradient(&s, &Point3::new(2.0, 0.0, 0.0));
        assert!((gp - Vec3::x()).norm() < 1e-8);
        assert!(gz[0] < 0.0);
        // with all three axes tied the radial derivative is -1; a alone carries it here
        assert!((gz[0] + 1.0).abs() < 1e-6, "d/da = {}", gz[0]);
    }

    #[test]
    fn sign_matches_inside_outside_indicator() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10_000 {
            let code = random_code(&mut rng);
            let p = random_point(&mut rng, 4.0);
            let f = inside_outside_value(&code, &p);
            if (f - 1.0).abs() < 1e-9 {
                continue;
            }
            assert_eq!(sdf_eval(&code, &p) < 0.0, f < 1.0, "code {code:?} p {p}");
        }
    }

    #[test]
    fn octant_symmetry_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let code = random_code(&mut rng);
            let p = random_point(&mut rng, 4.0);
            let v = sdf_eval(&code, &p);
            for signs in 0..8 {
                let s = |bit: i32| if signs & (1 << bit) != 0 { -1.0 } else { 1.0 };
                let q = Point3::new(s(0) * p.x, s(1) * p.y, s(2) * p.z);
                assert_eq!(sdf_eval(&code, &q), v);
            }
        }
    }

    #[test]
    fn growing_axes_decreases_outside_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut checked = 0;
        while checked < 1000 {
            let code = ShapeCode::new(
                rng.random_range(0.3..2.0),
                rng.random_range(0.3..2.0),
                rng.random_range(0.3..2.0),
                rng.random_range(EXPONENT_MIN..EXPONENT_MAX),
                rng.random_range(EXPONENT_MIN..EXPONENT_MAX),
            )
            .unwrap();
            let p = random_point(&mut rng, 5.0);
            if sdf_eval(&code, &p) <= 0.0 {
                continue;
            }
            let k = rng.random_range(1.01..2.0);
            assert!(sdf_eval(&code.with_scaled_axes(k), &p) < sdf_eval(&code, &p));
            checked += 1;
        }
    }

    #[test]
    fn point_gradient_has_unit_norm_away_from_medial_set() {
        let code = ShapeCode::new(1.5, 1.0, 0.8, 1.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let u = random_point(&mut rng, 1.0).coords.normalize();
            let p = Point3::from(u * rng.random_range(2.0..4.0));
            let s = sdf_sample(&code, &p);
            let n = s.gradient_point.norm();
            assert!((0.9..=1.1).contains(&n), "norm {n} at {p}");
        }
    }

    #[test]
    fn mesh_points_on_spheres() {
        let unit = ShapeCode::sphere(1.0).unwrap();
        let pts = extract_mesh_points(&unit, 64).unwrap();
        assert_eq!(pts.len(), 64 * 64);
        assert!(pts.iter().all(|p| (p.coords.norm() - 1.0).abs() < 2e-3));
        let two = ShapeCode::sphere(2.0).unwrap();
        let pts = extract_mesh_points(&two, 32).unwrap();
        assert!(pts.iter().all(|p| (p.coords.norm() - 2.0).abs() < 4e-3));
        assert_eq!(extract_mesh_points(&two, 32).unwrap(), pts);
    }

    #[test]
    fn mesh_points_grow_with_resolution_and_lie_on_surface() {
        let code = ShapeCode::new(2.0, 0.9, 0.7, 0.5, 0.7).unwrap();
        let coarse = extract_mesh_points(&code, 16).unwrap();
        let fine = extract_mesh_points(&code, 40).unwrap();
        assert!(fine.len() > coarse.len());
        for p in &fine {
            assert!(sdf_eval(&code, p).abs() < 1e-3 * code.max_axis());
        }
        assert_eq!(
            extract_mesh_points(&code, 15),
            Err(SdfError::ResolutionTooLow(15))
        );
    }

    #[test]
    fn box_like_mesh_extent_matches_half_axes() {
        let code = ShapeCode::new(1.2, 0.8, 0.5, 0.2, 0.2).unwrap();
        let pts = extract_mesh_points(&code, 96).unwrap();
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        let mut lo = Vec3::repeat(f64::INFINITY);
        for p in &pts {
            hi = hi.sup(&p.coords);
            lo = lo.inf(&p.coords);
        }
        let h = code.half_axes();
        for i in 0..3 {
            assert!((hi[i] - h[i]).abs() < 0.02 * h[i], "axis {i}: {} vs {}", hi[i], h[i]);
            assert!((lo[i] + h[i]).abs() < 0.02 * h[i]);
        }
    }

    #[test]
    fn bounding_box_follows_code_and_pose() {
        let unit = ShapeCode::sphere(1.0).unwrap();
        let b = tight_bounding_box(&unit, &RigidTransform::identity());
        assert_eq!(b.half_extents(), Vec3::repeat(1.0));
        let code = ShapeCode::new(2.0, 1.0, 0.5, 1.0, 1.0).unwrap();
        let b = tight_bounding_box(&code, &RigidTransform::identity());
        assert_eq!(b.half_extents(), Vec3::new(2.0, 1.0, 0.5));
        let rot = UnitQuaternion::from_axis_angle(&Vec3::z_axis(), std::f64::consts::FRAC_PI_2);
        let pose = RigidTransform::new(rot, Vec3::new(1.0, 2.0, 3.0));
        let b = tight_bounding_box(&code, &pose);
        assert_eq!(b.rotation, pose.rotation);
        assert_eq!(b.center, Point3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn normalized_code_maps_bounds_to_unit_interval() {
        let lo = ShapeCode::from_array(ShapeCode::lower_bounds()).unwrap();
        let hi = ShapeCode::from_array(ShapeCode::upper_bounds()).unwrap();
        assert!(lo.normalized().iter().all(|v| (v + 1.0).abs() < 1e-15));
        assert!(hi.normalized().iter().all(|v| (v - 1.0).abs() < 1e-15));
        assert!(ShapeCode::centered().normalized().norm() < 1e-15);
    }
}
