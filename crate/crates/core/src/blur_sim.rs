//! Synthetic flight generator with a feature-level motion-blur model.
//!
//! A camera loops around a ground-truth superellipsoid object while a
//! vibration and random gusts shake it. The blur extent of each frame,
//! `b = κ · ω · exposure`, drives how many features survive
//! (`N₀ · exp(−b'/b₀)`), how noisy their pixels are (`σ₀ + gain · b'`), and
//! (downstream, in the frontend) how noisy odometry is. A deblur operator
//! removes a fixed fraction of the blur extent before any of that happens.
//!
//! Every frame draws from its own sub-seed, and features are taken from a
//! seeded shuffle of the visible landmarks, so a deblurred frame always
//! contains the blurred frame's features as a prefix.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::ChessboardSpec;
use crate::geometry::{look_at, CameraIntrinsics, Pixel, Point3, RigidTransform, Vec3};
use crate::sdf::{extract_mesh_points, inside_outside_value, surface_normal, SdfError, ShapeCode};
use nalgebra::UnitQuaternion;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error(transparent)]
    Shape(#[from] SdfError),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> SimError {
    SimError::Invalid {
        field,
        reason: reason.into(),
    }
}

/// Stable 64-bit seed for a named stage (FNV-1a over the seed and name).
pub fn derive_seed(seed: u64, stage: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(stage.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn frame_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15), "frame")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub object_code: ShapeCode,
    /// `T_world_object`.
    pub object_pose: RigidTransform,
    pub object_point_count: usize,
    pub background_point_count: usize,
    /// Half extents of the background box, centered on the object in `x, y`
    /// and spanning `[0, 2·extent_z]` in height.
    pub background_extent: [f64; 3],
    /// Background points keep this multiple of the object's bounding radius
    /// away from its center.
    pub clear_zone_factor: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            object_code: ShapeCode::new(2.0, 0.9, 0.75, 0.5, 0.7).expect("valid default code"),
            object_pose: RigidTransform::new(
                UnitQuaternion::from_axis_angle(&Vec3::z_axis(), 0.3),
                Vec3::new(0.0, 0.0, 0.75),
            ),
            object_point_count: 1500,
            background_point_count: 3000,
            background_extent: [14.0, 12.0, 4.0],
            clear_zone_factor: 2.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.object_point_count == 0 {
            return Err(invalid("scene.object_point_count", "must be positive"));
        }
        if self.background_extent.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(invalid("scene.background_extent", "must be positive"));
        }
        if !(self.clear_zone_factor >= 1.0 && self.clear_zone_factor.is_finite()) {
            return Err(invalid("scene.clear_zone_factor", "must be at least 1"));
        }
        let r = self.clear_zone_factor * self.object_code.half_axes().norm();
        if r >= self.background_extent[0].min(self.background_extent[1]) {
            return Err(invalid("scene.clear_zone_factor", "clear zone covers the background box"));
        }
        if !self.object_pose.is_finite() {
            return Err(invalid("scene.object_pose", "non-finite"));
        }
        Ok(())
    }

    pub fn bounding_radius(&self) -> f64 {
        self.object_code.half_axes().norm()
    }
}

/// Landmarks of a generated scene. Object landmarks take ids
/// `0..object_points.len()`, background landmarks follow.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub object_points: Vec<Point3>,
    pub object_normals: Vec<Vec3>,
    pub background_points: Vec<Point3>,
}

impl Scene {
    pub fn landmark_count(&self) -> usize {
        self.object_points.len() + self.background_points.len()
    }

    pub fn landmark(&self, id: usize) -> Point3 {
        let n = self.object_points.len();
        if id < n {
            self.object_points[id]
        } else {
            self.background_points[id - n]
        }
    }

    pub fn is_object_landmark(&self, id: u64) -> bool {
        (id as usize) < self.object_points.len()
    }

    /// Whether the segment from `eye` to `p` passes through the object.
    pub fn occluded_by_object(&self, eye: &Point3, p: &Point3) -> bool {
        let inv = self.spec.object_pose.inverse();
        let a = inv.transform_point(eye).coords;
        let b = inv.transform_point(p).coords;
        let d = b - a;
        let len = d.norm();
        if len < 1e-12 {
            return false;
        }
        let u = d / len;
        let r = self.spec.bounding_radius();
        // segment/sphere overlap in the object frame
        let tc = -a.dot(&u);
        let miss2 = (a + u * tc).norm_squared();
        if miss2 > r * r {
            return false;
        }
        let half = (r * r - miss2).sqrt();
        let (t0, t1) = ((tc - half).max(0.0), (tc + half).min(len));
        if t0 >= t1 {
            return false;
        }
        let h = self.spec.object_code.half_axes();
        let step = 0.25 * h.x.min(h.y).min(h.z);
        let n = ((t1 - t0) / step).ceil() as usize + 1;
        (0..=n).any(|i| {
            let t = t0 + (t1 - t0) * i as f64 / n as f64;
            // stop short of a point that itself lies on the surface
            t < len - 1e-6 && inside_outside_value(&self.spec.object_code, &Point3::from(a + u * t)) < 1.0 - 1e-9
        })
    }
}

/// Surface and background landmarks, deterministic in `seed`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene, SimError> {
    spec.validate()?;
    let code = &spec.object_code;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "scene"));
    let mut resolution = ((spec.object_point_count as f64 * 1.2).sqrt().ceil() as usize).max(16);
    let surface = loop {
        let pts = extract_mesh_points(code, resolution)?;
        if pts.len() >= spec.object_point_count {
            break pts;
        }
        resolution *= 2;
    };
    let mut picked = rand::seq::index::sample(&mut rng, surface.len(), spec.object_point_count).into_vec();
    picked.sort_unstable();
    let object_points: Vec<Point3> = picked.iter().map(|&i| spec.object_pose.transform_point(&surface[i])).collect();
    let object_normals: Vec<Vec3> = picked
        .iter()
        .map(|&i| spec.object_pose.transform_vector(&surface_normal(code, &surface[i])))
        .collect();

    let c = spec.object_pose.translation;
    let e = spec.background_extent;
    let clear = spec.clear_zone_factor * spec.bounding_radius();
    let mut background_points = Vec::with_capacity(spec.background_point_count);
    while background_points.len() < spec.background_point_count {
        let p = Point3::new(
            c.x + rng.random_range(-e[0]..e[0]),
            c.y + rng.random_range(-e[1]..e[1]),
            rng.random_range(0.0..2.0 * e[2]),
        );
        if (p.coords - c).norm() >= clear {
            background_points.push(p);
        }
    }
    Ok(Scene {
        spec: *spec,
        object_points,
        object_normals,
        background_points,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectorySpec {
    /// Semi-axes of the elliptical loop around the object (meters).
    pub semi_axes: [f64; 2],
    /// Camera height above the ground plane (meters).
    pub height: f64,
    pub duration: f64,
    pub frame_rate: f64,
    /// Loop phase of the first frame (radians; `-π/2` starts broadside).
    pub start_phase: f64,
    /// Amplitude of the per-axis vibration (radians).
    pub vibration_amplitude: f64,
    /// Vibration frequencies of the three rotation axes (Hz).
    pub vibration_frequencies: [f64; 3],
    /// Mean number of gusts per second.
    pub gust_rate: f64,
    /// Range of gust peak angular speeds (rad/s).
    pub gust_peak_speed: [f64; 2],
    /// Duration of one gust (seconds).
    pub gust_duration: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            semi_axes: [7.0, 5.5],
            height: 2.5,
            duration: 180.0,
            frame_rate: 15.0,
            start_phase: -std::f64::consts::FRAC_PI_2,
            vibration_amplitude: 0.02,
            vibration_frequencies: [3.1, 4.3, 3.7],
            gust_rate: 1.0 / 30.0,
            gust_peak_speed: [1.4, 2.0],
            gust_duration: 0.4,
        }
    }
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.semi_axes.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(invalid("trajectory.semi_axes", "must be positive"));
        }
        if !(self.duration > 0.0 && self.frame_rate > 0.0) {
            return Err(invalid("trajectory", "duration and frame_rate must be positive"));
        }
        if !(self.vibration_amplitude >= 0.0 && self.gust_rate >= 0.0 && self.gust_duration > 0.0) {
            return Err(invalid("trajectory", "vibration and gust parameters must be non-negative"));
        }
        if !(self.gust_peak_speed[0] >= 0.0 && self.gust_peak_speed[0] <= self.gust_peak_speed[1]) {
            return Err(invalid("trajectory.gust_peak_speed", "need 0 <= lo <= hi"));
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        (self.duration * self.frame_rate).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Gust {
    start: f64,
    axis: [f64; 3],
    /// Peak rotation offset (radians).
    magnitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFrame {
    pub index: usize,
    pub timestamp: f64,
    /// `T_world_cam`.
    pub pose: RigidTransform,
    /// Instantaneous angular speed (rad/s).
    pub angular_speed: f64,
}

/// Ring-loop flight facing the object, with vibration and gust shakes.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub spec: TrajectorySpec,
    pub frames: Vec<TrajectoryFrame>,
}

struct Shaker {
    spec: TrajectorySpec,
    center: Point3,
    phases: [f64; 3],
    gusts: Vec<Gust>,
}

impl Shaker {
    fn pose_at(&self, t: f64) -> RigidTransform {
        let s = &self.spec;
        let theta = s.start_phase + 2.0 * std::f64::consts::PI * t / s.duration;
        let eye = Point3::new(
            self.center.x + s.semi_axes[0] * theta.cos(),
            self.center.y + s.semi_axes[1] * theta.sin(),
            s.height,
        );
        let base = look_at(&eye, &self.center, &Vec3::z());
        let mut w = Vec3::zeros();
        for i in 0..3 {
            w[i] = s.vibration_amplitude * (2.0 * std::f64::consts::PI * s.vibration_frequencies[i] * t + self.phases[i]).sin();
        }
        for g in &self.gusts {
            let u = (t - g.start) / s.gust_duration;
            if (0.0..=1.0).contains(&u) {
                let bump = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * u).cos());
                w += Vec3::from(g.axis) * (g.magnitude * bump);
            }
        }
        base.compose(&RigidTransform::from_rotation(UnitQuaternion::from_scaled_axis(w)))
    }

    fn angular_speed(&self, t: f64) -> f64 {
        let dt = 1e-4;
        self.pose_at(t).rotation_angle_to(&self.pose_at(t + dt)) / dt
    }
}

/// Loop around `center` deterministic in `seed`.
pub fn generate_trajectory(spec: &TrajectorySpec, center: &Point3, seed: u64) -> Result<Trajectory, SimError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "trajectory"));
    let phases = [
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(0.0..std::f64::consts::TAU),
    ];
    let mut gusts = Vec::new();
    if spec.gust_rate > 0.0 {
        let mut t = 0.0;
        loop {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            t += -u.ln() / spec.gust_rate;
            if t >= spec.duration {
                break;
            }
            let axis = loop {
                let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let n = v.norm();
                if n > 0.1 && n <= 1.0 {
                    break v / n;
                }
            };
            let peak = rng.random_range(spec.gust_peak_speed[0]..=spec.gust_peak_speed[1]);
            // raised-cosine bump: peak rate = magnitude * π / duration
            gusts.push(Gust {
                start: t,
                axis: [axis.x, axis.y, axis.z],
                magnitude: peak * spec.gust_duration / std::f64::consts::PI,
            });
        }
    }
    let shaker = Shaker {
        spec: *spec,
        center: *center,
        phases,
        gusts,
    };
    let frames = (0..spec.frame_count())
        .into_par_iter()
        .map(|i| {
            let t = i as f64 / spec.frame_rate;
            TrajectoryFrame {
                index: i,
                timestamp: t,
                pose: shaker.pose_at(t),
                angular_speed: shaker.angular_speed(t),
            }
        })
        .collect();
    Ok(Trajectory { spec: *spec, frames })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlurModel {
    /// Exposure time (seconds).
    pub exposure: f64,
    /// Blur gain κ (pixels per rad/s per second of exposure).
    pub blur_gain: f64,
    /// Feature count of a sharp frame.
    pub base_feature_count: usize,
    /// Blur extent at which feature yield drops by `1/e` (pixels).
    pub yield_decay: f64,
    /// Pixel noise of a sharp frame (pixels).
    pub noise_floor: f64,
    /// Extra pixel noise per pixel of blur.
    pub noise_gain: f64,
}

impl Default for BlurModel {
    fn default() -> Self {
        Self {
            exposure: 0.01,
            blur_gain: 400.0,
            base_feature_count: 200,
            yield_decay: 2.0,
            noise_floor: 0.5,
            noise_gain: 0.25,
        }
    }
}

impl BlurModel {
    pub fn validate(&self) -> Result<(), SimError> {
        let all = [self.exposure, self.blur_gain, self.yield_decay, self.noise_floor, self.noise_gain];
        if all.iter().any(|v| !(*v > 0.0 && v.is_finite())) || self.base_feature_count == 0 {
            return Err(invalid("blur", "all parameters must be positive"));
        }
        Ok(())
    }

    /// Feature count `round(N₀ · exp(−b'/b₀))` for effective blur `b'`.
    pub fn feature_count(&self, effective_blur: f64) -> usize {
        (self.base_feature_count as f64 * (-effective_blur / self.yield_decay).exp()).round() as usize
    }

    /// Per-feature pixel noise standard deviation `σ₀ + gain · b'`.
    pub fn pixel_noise(&self, effective_blur: f64) -> f64 {
        self.noise_floor + self.noise_gain * effective_blur
    }
}

/// `b = κ · ω · exposure`.
pub fn blur_extent(model: &BlurModel, angular_speed: f64) -> f64 {
    model.blur_gain * angular_speed.max(0.0) * model.exposure
}

/// Restoration that removes a fraction `efficiency` of the blur extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeblurOperator {
    pub efficiency: f64,
}

impl Default for DeblurOperator {
    fn default() -> Self {
        Self { efficiency: 0.8 }
    }
}

impl DeblurOperator {
    pub fn new(efficiency: f64) -> Result<Self, SimError> {
        let d = Self { efficiency };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(0.0..=1.0).contains(&self.efficiency) {
            return Err(invalid("deblur.efficiency", format!("{} outside [0, 1]", self.efficiency)));
        }
        Ok(())
    }
}

/// `b' = b · (1 − ρ_d)` with a deblur operator, else `b`.
pub fn effective_blur(blur: f64, deblur: Option<&DeblurOperator>) -> f64 {
    match deblur {
        Some(d) => blur * (1.0 - d.efficiency),
        None => blur,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub landmark_id: u64,
    pub pixel: Pixel,
}

/// One camera frame as seen by the frontend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub index: usize,
    pub timestamp: f64,
    /// Ground-truth `T_world_cam`.
    pub pose: RigidTransform,
    /// Effective blur extent (pixels).
    pub blur_level: f64,
    pub features: Vec<Feature>,
    /// Detected chessboard corners, row-major, when requested and fully
    /// visible.
    pub board_corners: Option<Vec<[f64; 2]>>,
}

impl Frame {
    pub fn feature_count(&self) -> usize {
        self.features.len()
    }
}

/// Landmarks visible from `pose`: in front of the camera, inside the image,
/// facing the camera (object points) or not hidden by the object
/// (background points). Returns ids with exact pixels.
pub fn visible_landmarks(scene: &Scene, k: &CameraIntrinsics, pose: &RigidTransform) -> Vec<(u64, Pixel)> {
    let cam_world = pose.inverse();
    let eye = Point3::from(pose.translation);
    let mut out = Vec::new();
    for (i, (p, n)) in scene.object_points.iter().zip(&scene.object_normals).enumerate() {
        if n.dot(&(eye - p)) <= 0.0 {
            continue;
        }
        if let Ok(px) = k.project(&cam_world.transform_point(p)) {
            if k.in_image(&px) {
                out.push((i as u64, px));
            }
        }
    }
    let n_obj = scene.object_points.len();
    for (j, p) in scene.background_points.iter().enumerate() {
        if let Ok(px) = k.project(&cam_world.transform_point(p)) {
            if k.in_image(&px) && !scene.occluded_by_object(&eye, p) {
                out.push(((n_obj + j) as u64, px));
            }
        }
    }
    out
}

/// Simulates one frame. The shuffle of visible landmarks and the unit noise
/// draws depend only on `(seed, index)`, so frames with less blur contain
/// the same leading features with proportionally smaller noise.
#[allow(clippy::too_many_arguments)]
pub fn simulate_frame(
    scene: &Scene,
    k: &CameraIntrinsics,
    traj: &TrajectoryFrame,
    model: &BlurModel,
    deblur: Option<&DeblurOperator>,
    board: Option<&ChessboardSpec>,
    seed: u64,
) -> Frame {
    let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(seed, traj.index));
    let b = effective_blur(blur_extent(model, traj.angular_speed), deblur);
    let sigma = model.pixel_noise(b);
    let mut visible = visible_landmarks(scene, k, &traj.pose);
    visible.shuffle(&mut rng);
    let n = model.feature_count(b).min(visible.len());
    let mut features = Vec::with_capacity(n);
    for (id, px) in visible.iter().take(n) {
        let nx: f64 = StandardNormal.sample(&mut rng);
        let ny: f64 = StandardNormal.sample(&mut rng);
        features.push(Feature {
            landmark_id: *id,
            pixel: Pixel::new(px.x + sigma * nx, px.y + sigma * ny),
        });
    }
    let board_corners = board.and_then(|bs| {
        let mut crng = ChaCha8Rng::seed_from_u64(derive_seed(frame_seed(seed, traj.index), "board"));
        board_corners(bs, k, &traj.pose).map(|pts| {
            pts.iter()
                .map(|p| {
                    let nx: f64 = StandardNormal.sample(&mut crng);
                    let ny: f64 = StandardNormal.sample(&mut crng);
                    [p.x + sigma * nx, p.y + sigma * ny]
                })
                .collect()
        })
    });
    Frame {
        index: traj.index,
        timestamp: traj.timestamp,
        pose: traj.pose,
        blur_level: b,
        features,
        board_corners,
    }
}

/// Exact corner pixels when the whole board is in view and faces the camera.
pub fn board_corners(board: &ChessboardSpec, k: &CameraIntrinsics, pose: &RigidTransform) -> Option<Vec<Pixel>> {
    let cam_board = pose.inverse().compose(&board.board_pose);
    // board normal (+z) must point towards the camera
    let normal_cam = cam_board.transform_vector(&Vec3::z());
    let center_cam = cam_board.transform_point(&board.grid_center());
    if normal_cam.dot(&center_cam.coords) >= 0.0 {
        return None;
    }
    board
        .grid_points()
        .iter()
        .map(|p| k.project(&cam_board.transform_point(p)).ok().filter(|px| k.in_image(px)))
        .collect()
}

/// Board placed `distance` meters in front of `camera` (`T_world_cam`),
/// offset by `offset` (camera-frame meters), facing the camera.
pub fn board_facing_camera(
    camera: &RigidTransform,
    rows: usize,
    cols: usize,
    square_size: f64,
    distance: f64,
    offset: [f64; 2],
) -> Result<ChessboardSpec, crate::calibration::CalibrationError> {
    // board frame: x along camera x, y along camera y, z towards the camera
    let rot = camera.rotation * UnitQuaternion::from_axis_angle(&Vec3::x_axis(), std::f64::consts::PI);
    let proto = ChessboardSpec::new(rows, cols, square_size, RigidTransform::identity())?;
    let c = proto.grid_center();
    let center_world = camera.transform_point(&Point3::new(offset[0], offset[1], distance));
    let t = center_world.coords - rot * c.coords;
    ChessboardSpec::new(rows, cols, square_size, RigidTransform::new(rot, t))
}

/// Simulates every frame of a trajectory in parallel.
pub fn simulate_flight(
    scene: &Scene,
    k: &CameraIntrinsics,
    trajectory: &Trajectory,
    model: &BlurModel,
    deblur: Option<&DeblurOperator>,
    board: Option<(&ChessboardSpec, &(dyn Fn(usize) -> bool + Sync))>,
    seed: u64,
) -> Vec<Frame> {
    trajectory
        .frames
        .par_iter()
        .map(|tf| {
            let b = board.and_then(|(bs, want)| want(tf.index).then_some(bs));
            simulate_frame(scene, k, tf, model, deblur, b, seed)
        })
        .collect()
}
