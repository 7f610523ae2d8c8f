//! End-to-end experiment: simulate a flight, track and map it, reconstruct
//! the object when the keyframe trigger fires, recover metric scale from the
//! chessboard and score the result against ground truth.
//!
//! The SLAM frame is the first ground-truth camera scaled by an unknown
//! factor drawn from the seed, so calibration has real work to do. Odometry
//! between keyframes is the ground-truth motion perturbed by noise that
//! grows with the frame's blur level and with the frame gap.
//!
//! Every stage draws its randomness from [`derive_seed`] with a fixed stage
//! name, so blurred and deblurred runs of one seed share scene, trajectory
//! and board.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix2, Matrix3, Matrix4, SymmetricEigen, UnitQuaternion, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifacts::{self, ArtifactError};
use crate::blur_sim::{
    board_facing_camera, derive_seed, generate_scene, generate_trajectory, simulate_flight, BlurModel,
    DeblurOperator, Frame, Scene, SceneSpec, SimError, Trajectory, TrajectorySpec,
};
use crate::calibration::{calibrate, CalibrationError, CalibrationFrame, CalibrationInput, CalibrationResult, ChessboardSpec};
use crate::geometry::{CameraIntrinsics, GeometryError, Pixel, Point3, Ray, RigidTransform, SimilarityTransform, Vec3};
use crate::metrics::{evaluate_run, object_mesh_world, EvalParams, MetricsError, MetricsReport};
use crate::reconstruction::{
    optimize_object, ray_between, ConvergenceRecord, EnergyWeights, HypothesisStatus, ObjectHypothesis,
    OptimizeOptions, ReconstructionError, RenderObservation,
};
use crate::sdf::{extract_mesh_points, tight_bounding_box, SdfError, ShapeCode};
use crate::slam_graph::{
    FactorGraph, GraphError, JointOptions, JointReport, JointWeights, Keyframe, Observation, OdometryNoise,
    TrackingMonitor, TrackingStatus, TriggerPolicy,
};

/// Id of the single tracked object.
pub const OBJECT_ID: u64 = 0;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Reconstruction(#[from] ReconstructionError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Shape(#[from] SdfError),
    #[error("{stage}: {reason}")]
    Stage { stage: &'static str, reason: String },
    #[error("reports are not comparable: {0}")]
    Mismatch(String),
}

fn stage_error(stage: &'static str, reason: impl Into<String>) -> PipelineError {
    PipelineError::Stage {
        stage,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendParams {
    /// Tracked frames between keyframes.
    pub keyframe_interval: usize,
    /// Matched features below which a frame is lost.
    pub tracking_threshold: usize,
    /// Minimum ray angle before a landmark is triangulated (degrees).
    pub min_parallax_deg: f64,
    /// Largest reprojection error accepted at triangulation (pixels).
    pub max_reprojection_px: f64,
    /// Views kept per untriangulated landmark.
    pub max_pending_views: usize,
    /// Relative growth of the projected object box used as segmentation mask.
    pub mask_inflation: f64,
    /// Range of the hidden SLAM-to-metric scale.
    pub slam_scale_range: [f64; 2],
}

impl Default for FrontendParams {
    fn default() -> Self {
        Self {
            keyframe_interval: 15,
            tracking_threshold: 30,
            min_parallax_deg: 3.0,
            max_reprojection_px: 6.0,
            max_pending_views: 8,
            mask_inflation: 0.05,
            slam_scale_range: [0.7, 1.4],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconstructionParams {
    pub weights: EnergyWeights,
    pub optimizer: OptimizeOptions,
    /// Every n-th keyframe contributes render rays.
    pub keyframe_stride: usize,
    pub max_depth_rays: usize,
    /// Depth rays are cast only at points projecting into this central
    /// fraction of the mask, where rays do not graze the silhouette.
    pub depth_ray_core: f64,
    /// Exterior rays sampled along each edge of a mask.
    pub exterior_rays_per_edge: usize,
    /// Exterior ray offset outside the mask, as a fraction of its size.
    pub exterior_offset: f64,
    /// Associated points farther than this multiple of the median distance
    /// from the median point are ignored during fitting.
    pub outlier_factor: f64,
    /// Fit the surface term alone before adding render terms when starting
    /// from a fresh initialization.
    pub surface_prefit: bool,
}

impl Default for ReconstructionParams {
    fn default() -> Self {
        Self {
            // Triangulated points are metre-scale and dense, so the shape
            // prior is weakened relative to the library default.
            weights: EnergyWeights {
                lambda_c: 1e-4,
                ..EnergyWeights::default()
            },
            optimizer: OptimizeOptions::default(),
            keyframe_stride: 2,
            max_depth_rays: 150,
            depth_ray_core: 0.5,
            exterior_rays_per_edge: 10,
            exterior_offset: 0.01,
            outlier_factor: 2.5,
            surface_prefit: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationParams {
    pub inner_rows: usize,
    pub inner_cols: usize,
    pub square_size: f64,
    /// Board distance in front of the first camera (meters).
    pub distance: f64,
    /// Board center offset in the first camera's image plane (meters).
    pub offset: [f64; 2],
    /// The second calibration keyframe is the first one at or after this
    /// frame index that sees the whole board.
    pub second_frame_min: usize,
    /// Frames after `second_frame_min` in which board corners are detected.
    pub second_frame_window: usize,
}

impl Default for CalibrationParams {
    fn default() -> Self {
        Self {
            inner_rows: 6,
            inner_cols: 9,
            square_size: 0.12,
            distance: 3.0,
            offset: [0.0, 0.3],
            second_frame_min: 150,
            second_frame_window: 150,
        }
    }
}

/// One experiment, serialized as a single JSON document with one section
/// per stage. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub trajectory: TrajectorySpec,
    pub camera: CameraIntrinsics,
    pub blur: BlurModel,
    /// `null` runs on blurred frames.
    pub deblur: Option<DeblurOperator>,
    pub frontend: FrontendParams,
    pub odometry: OdometryNoise,
    pub trigger: TriggerPolicy,
    pub joint_weights: JointWeights,
    pub joint: JointOptions,
    pub reconstruction: ReconstructionParams,
    pub calibration: CalibrationParams,
    pub metrics: EvalParams,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            trajectory: TrajectorySpec::default(),
            camera: CameraIntrinsics {
                fx: 500.0,
                fy: 500.0,
                cx: 320.0,
                cy: 240.0,
                width: 640,
                height: 480,
            },
            blur: BlurModel::default(),
            deblur: Some(DeblurOperator::default()),
            frontend: FrontendParams::default(),
            odometry: OdometryNoise::default(),
            trigger: TriggerPolicy::default(),
            joint_weights: JointWeights::default(),
            joint: JointOptions::default(),
            reconstruction: ReconstructionParams::default(),
            calibration: CalibrationParams::default(),
            metrics: EvalParams::default(),
            seed: 0,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg = |m: String| PipelineError::Config(m);
        self.scene.validate()?;
        self.trajectory.validate()?;
        self.camera.validate()?;
        self.blur.validate()?;
        if let Some(d) = &self.deblur {
            d.validate()?;
        }
        self.trigger.validate()?;
        self.reconstruction.weights.validate()?;
        let f = &self.frontend;
        if f.keyframe_interval == 0 || f.max_pending_views < 2 {
            return Err(cfg("frontend: keyframe_interval >= 1 and max_pending_views >= 2 required".into()));
        }
        if !(f.slam_scale_range[0] > 0.0 && f.slam_scale_range[0] <= f.slam_scale_range[1]) {
            return Err(cfg("frontend.slam_scale_range must satisfy 0 < lo <= hi".into()));
        }
        if !(f.min_parallax_deg >= 0.0 && f.max_reprojection_px > 0.0 && f.mask_inflation >= 0.0) {
            return Err(cfg("frontend: parallax, reprojection and inflation limits must be non-negative".into()));
        }
        let r = &self.reconstruction;
        if r.keyframe_stride == 0 || !(r.outlier_factor > 1.0) || !(0.0..=1.0).contains(&r.depth_ray_core) {
            return Err(cfg("reconstruction: keyframe_stride >= 1, outlier_factor > 1 and depth_ray_core in [0, 1] required".into()));
        }
        let o = &self.odometry;
        if !(o.rotation_sigma > 0.0 && o.translation_sigma > 0.0) {
            return Err(cfg("odometry sigmas must be positive".into()));
        }
        let w = &self.joint_weights;
        if !(w.pixel_sigma > 0.0 && w.object_sigma > 0.0 && w.object_gate > 0.0) {
            return Err(cfg("joint_weights sigmas and gate must be positive".into()));
        }
        let c = &self.calibration;
        ChessboardSpec::new(c.inner_rows, c.inner_cols, c.square_size, RigidTransform::identity())?;
        if !(c.distance > 0.0) {
            return Err(cfg("calibration.distance must be positive".into()));
        }
        if !(self.metrics.tau > 0.0) {
            return Err(cfg("metrics.tau must be positive".into()));
        }
        Ok(())
    }
}

/// Everything derived from the seed before any frame is simulated.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub scene: Scene,
    pub trajectory: Trajectory,
    pub board: ChessboardSpec,
    /// Metric length of one SLAM unit.
    pub slam_scale: f64,
    /// Ground-truth `T_world_slam`.
    pub world_from_slam: SimilarityTransform,
}

impl Simulation {
    /// Ground-truth `T_slam_cam` of a world camera pose.
    pub fn slam_pose(&self, world_cam: &RigidTransform) -> RigidTransform {
        let r = self.world_from_slam.rigid;
        let rel = r.inverse().compose(world_cam);
        RigidTransform::new(rel.rotation, rel.translation / self.slam_scale)
    }

    /// Metric distance between a SLAM-frame point and a world point.
    pub fn slam_error(&self, slam_point: &Point3, world_point: &Point3) -> f64 {
        (self.world_from_slam.transform_point(slam_point) - world_point).norm()
    }

    pub fn object_pose(&self) -> RigidTransform {
        self.scene.spec.object_pose
    }
}

pub fn prepare(config: &RunConfig) -> Result<Simulation, PipelineError> {
    let scene = generate_scene(&config.scene, config.seed)?;
    let center = Point3::from(config.scene.object_pose.translation);
    let trajectory = generate_trajectory(&config.trajectory, &center, config.seed)?;
    let first = trajectory
        .frames
        .first()
        .ok_or_else(|| PipelineError::Config("trajectory has no frames".into()))?
        .pose;
    let c = &config.calibration;
    let board = board_facing_camera(&first, c.inner_rows, c.inner_cols, c.square_size, c.distance, c.offset)?;
    let [lo, hi] = config.frontend.slam_scale_range;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "slam_scale"));
    let slam_scale = if lo < hi { rng.random_range(lo..hi) } else { lo };
    let world_from_slam = SimilarityTransform::new(slam_scale, first)?;
    Ok(Simulation {
        scene,
        trajectory,
        board,
        slam_scale,
        world_from_slam,
    })
}

/// Frames of the configured flight, with board corners in the calibration
/// windows.
pub fn simulate_frames(config: &RunConfig, sim: &Simulation) -> Vec<Frame> {
    let c = config.calibration;
    let want = move |i: usize| i == 0 || (i >= c.second_frame_min && i < c.second_frame_min + c.second_frame_window);
    simulate_flight(
        &sim.scene,
        &config.camera,
        &sim.trajectory,
        &config.blur,
        config.deblur.as_ref(),
        Some((&sim.board, &want)),
        config.seed,
    )
}

/// Axis-aligned image rectangle used as a segmentation mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskRect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl MaskRect {
    pub fn contains(&self, px: &Pixel) -> bool {
        px.x >= self.min[0] && px.x <= self.max[0] && px.y >= self.min[1] && px.y <= self.max[1]
    }

    /// Rectangle with the same center and `fraction` of the size.
    pub fn shrunk(&self, fraction: f64) -> MaskRect {
        let c = [0.5 * (self.min[0] + self.max[0]), 0.5 * (self.min[1] + self.max[1])];
        let [w, h] = self.size();
        let (hw, hh) = (0.5 * fraction * w, 0.5 * fraction * h);
        MaskRect {
            min: [c[0] - hw, c[1] - hh],
            max: [c[0] + hw, c[1] + hh],
        }
    }

    fn size(&self) -> [f64; 2] {
        [self.max[0] - self.min[0], self.max[1] - self.min[1]]
    }
}

/// Projected ground-truth box of the object, grown by `inflation` and
/// clipped to the image. `None` when the box is behind the camera or off
/// screen.
pub fn object_mask(scene: &Scene, k: &CameraIntrinsics, world_cam: &RigidTransform, inflation: f64) -> Option<MaskRect> {
    let cam_world = world_cam.inverse();
    let bx = tight_bounding_box(&scene.spec.object_code, &scene.spec.object_pose);
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for c in bx.corners() {
        let px = k.project(&cam_world.transform_point(&c)).ok()?;
        lo = [lo[0].min(px.x), lo[1].min(px.y)];
        hi = [hi[0].max(px.x), hi[1].max(px.y)];
    }
    let grow = [0.5 * inflation * (hi[0] - lo[0]), 0.5 * inflation * (hi[1] - lo[1])];
    let (w, h) = (k.width as f64, k.height as f64);
    let m = MaskRect {
        min: [(lo[0] - grow[0]).max(0.0), (lo[1] - grow[1]).max(0.0)],
        max: [(hi[0] + grow[0]).min(w), (hi[1] + grow[1]).min(h)],
    };
    (m.min[0] < m.max[0] && m.min[1] < m.max[1]).then_some(m)
}

/// Linear triangulation from `(T_world_cam, pixel)` views.
pub fn triangulate(k: &CameraIntrinsics, views: &[(RigidTransform, Pixel)]) -> Option<Point3> {
    if views.len() < 2 {
        return None;
    }
    let mut ata = Matrix4::zeros();
    for (pose, px) in views {
        let cw = pose.inverse();
        let r = cw.rotation_matrix();
        let t = cw.translation;
        let d = k.back_project(px, 1.0);
        let row = |i: usize| nalgebra::RowVector4::new(r[(i, 0)], r[(i, 1)], r[(i, 2)], t[i]);
        for a in [row(0) - row(2) * d.x, row(1) - row(2) * d.y] {
            ata += a.transpose() * a;
        }
    }
    let eig = SymmetricEigen::new(ata);
    let i = eig.eigenvalues.imin();
    let h = eig.eigenvectors.column(i);
    if h[3].abs() < 1e-12 {
        return None;
    }
    let p = Point3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);
    p.coords.iter().all(|v| v.is_finite()).then_some(p)
}

/// Keeps points within `factor` times the median distance from the
/// component-wise median.
pub fn filter_outliers(points: &[(u64, Point3)], factor: f64) -> Vec<(u64, Point3)> {
    if points.len() < 3 {
        return points.to_vec();
    }
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let m = Point3::new(
        median(points.iter().map(|p| p.1.x).collect()),
        median(points.iter().map(|p| p.1.y).collect()),
        median(points.iter().map(|p| p.1.z).collect()),
    );
    let d: Vec<f64> = points.iter().map(|p| (p.1 - m).norm()).collect();
    let limit = factor * median(d.clone());
    points.iter().zip(&d).filter(|(_, d)| **d <= limit).map(|(p, _)| *p).collect()
}

/// Initial object pose and code from supporting points and the cameras that
/// saw them. The vertical is the direction orthogonal to every camera's
/// image x-axis; yaw follows the dominant horizontal spread of the points.
pub fn initialize_object(points: &[Point3], cameras: &[RigidTransform]) -> Option<(RigidTransform, ShapeCode)> {
    if points.len() < 3 || cameras.is_empty() {
        return None;
    }
    let mut m = Matrix3::zeros();
    let mut down = Vec3::zeros();
    for c in cameras {
        let x = c.rotation * Vec3::x();
        m += x * x.transpose();
        down += c.rotation * Vec3::y();
    }
    let eig = SymmetricEigen::new(m);
    let mut up: Vec3 = eig.eigenvectors.column(eig.eigenvalues.imin()).into_owned();
    if up.dot(&down) > 0.0 {
        up = -up;
    }
    let centroid = points.iter().fold(Vec3::zeros(), |a, p| a + p.coords) / points.len() as f64;
    let seed_axis = if up.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u1 = (seed_axis - up * up.dot(&seed_axis)).normalize();
    let u2 = up.cross(&u1);
    let mut cov = Matrix2::zeros();
    for p in points {
        let d = p.coords - centroid;
        let h = nalgebra::Vector2::new(d.dot(&u1), d.dot(&u2));
        cov += h * h.transpose();
    }
    let e2 = SymmetricEigen::new(cov);
    let major = e2.eigenvectors.column(e2.eigenvalues.imax());
    let x_axis = (u1 * major[0] + u2 * major[1]).normalize();
    let y_axis = up.cross(&x_axis);
    let rot = Matrix3::from_columns(&[x_axis, y_axis, up]);
    let rotation = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(rot));
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        let q = rot.transpose() * (p.coords - centroid);
        lo = lo.inf(&q);
        hi = hi.sup(&q);
    }
    let mid = (lo + hi) * 0.5;
    let half = (hi - lo) * 0.5;
    let center = centroid + rot * mid;
    let code = ShapeCode::clamped([half.x, half.y, half.z, 1.0, 1.0]);
    Some((RigidTransform::new(rotation, center), code))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriggerInfo {
    pub keyframe_count: usize,
    pub frame_index: usize,
    pub associated_points: usize,
    pub inlier_points: usize,
    /// Metric distance between the reconstructed and true object centers.
    pub translation_error: f64,
}

/// State after the tracking and mapping pass.
#[derive(Debug, Clone)]
pub struct FrontendOutcome {
    pub graph: FactorGraph,
    pub tracking: TrackingMonitor,
    /// Frame index of every keyframe.
    pub keyframe_frames: Vec<usize>,
    /// Ground-truth `T_slam_cam` of every keyframe.
    pub keyframe_truth: Vec<RigidTransform>,
    pub masks: Vec<Option<MaskRect>>,
    pub trigger: Option<TriggerInfo>,
    pub trigger_convergence: Vec<(String, ConvergenceRecord)>,
    pub frames_processed: usize,
    pub total_features: usize,
    pub total_blur: f64,
    pub log: Vec<String>,
}

struct Pending {
    views: Vec<(u64, Pixel)>,
}

/// Depth rays at supporting points seen near the middle of a mask, and
/// exterior rays just outside each mask edge, from every
/// `keyframe_stride`-th keyframe.
pub fn render_observations(
    graph: &FactorGraph,
    masks: &[Option<MaskRect>],
    inlier_ids: &BTreeSet<u64>,
    params: &ReconstructionParams,
) -> Result<Vec<RenderObservation>, PipelineError> {
    let k = &graph.intrinsics;
    let mut depth = Vec::new();
    let mut exterior = Vec::new();
    for (kf, mask) in graph.keyframes().iter().zip(masks).step_by(params.keyframe_stride) {
        let Some(mask) = mask else { continue };
        let eye = Point3::from(kf.pose.translation);
        let core = mask.shrunk(params.depth_ray_core);
        for o in &kf.observations {
            if inlier_ids.contains(&o.point_id) && core.contains(&o.pixel) {
                if let Some((ray, d)) = ray_between(&eye, &graph.map_points()[&o.point_id].position) {
                    depth.push(RenderObservation::depth(ray, d)?);
                }
            }
        }
        let n = params.exterior_rays_per_edge;
        let [w, h] = mask.size();
        let (dx, dy) = (params.exterior_offset * w, params.exterior_offset * h);
        for i in 0..n {
            let f = (i as f64 + 0.5) / n as f64;
            let u = mask.min[0] + f * w;
            let v = mask.min[1] + f * h;
            let border = [
                Pixel::new(u, mask.min[1] - dy),
                Pixel::new(u, mask.max[1] + dy),
                Pixel::new(mask.min[0] - dx, v),
                Pixel::new(mask.max[0] + dx, v),
            ];
            for px in border.iter().filter(|px| k.in_image(px)) {
                let dir = kf.pose.rotation * k.pixel_direction(px);
                exterior.push(RenderObservation::exterior(Ray::new(eye, dir)?));
            }
        }
    }
    if depth.len() > params.max_depth_rays {
        let step = depth.len() as f64 / params.max_depth_rays as f64;
        depth = (0..params.max_depth_rays).map(|i| depth[(i as f64 * step) as usize]).collect();
    }
    depth.extend(exterior);
    Ok(depth)
}

/// Refits the object in `graph` from its associated points and the masks of
/// its keyframes. A pending object is initialized from its points; a
/// converged one is refined from its current state.
pub fn reconstruct_object(
    graph: &FactorGraph,
    masks: &[Option<MaskRect>],
    params: &ReconstructionParams,
) -> Result<ObjectFit, PipelineError> {
    let obj = graph
        .object(OBJECT_ID)
        .ok_or(GraphError::UnknownObject(OBJECT_ID))?
        .clone();
    let associated: Vec<(u64, Point3)> = obj
        .associated_point_ids
        .iter()
        .filter_map(|id| graph.map_point(*id).map(|m| (*id, m.position)))
        .collect();
    let inliers = filter_outliers(&associated, params.outlier_factor);
    let min = params.optimizer.min_points;
    if inliers.len() < min {
        return Err(ReconstructionError::InsufficientObservations {
            got: inliers.len(),
            need: min,
        }
        .into());
    }
    let points: Vec<Point3> = inliers.iter().map(|p| p.1).collect();
    let mut hyp = obj.clone();
    let fresh = obj.status != HypothesisStatus::Converged;
    if fresh {
        let cams: Vec<RigidTransform> = graph.keyframes().iter().map(|k| k.pose).collect();
        let (pose, code) = initialize_object(&points, &cams).ok_or_else(|| stage_error("reconstruction", "initialization failed"))?;
        hyp.pose = pose;
        hyp.code = code;
    }
    hyp.status = HypothesisStatus::Pending;
    hyp.begin_reconstruction()?;

    let mut prefit = None;
    if fresh && params.surface_prefit && params.weights.lambda_r > 0.0 {
        // Silhouette and depth terms are only piecewise smooth; settle the
        // surface fit first so they start from a nearby basin.
        let surface_only = EnergyWeights {
            lambda_r: 0.0,
            ..params.weights
        };
        let (fitted, record) = optimize_object(&hyp, &points, &[], &surface_only, &params.optimizer)?;
        hyp.pose = fitted.pose;
        hyp.code = fitted.code;
        prefit = Some(record);
    }

    let inlier_ids: BTreeSet<u64> = inliers.iter().map(|p| p.0).collect();
    let observations = render_observations(graph, masks, &inlier_ids, params)?;
    let (hypothesis, record) = optimize_object(&hyp, &points, &observations, &params.weights, &params.optimizer)?;
    Ok(ObjectFit {
        hypothesis,
        prefit,
        record,
        inliers: inliers.len(),
    })
}

/// Result of one object reconstruction.
#[derive(Debug, Clone)]
pub struct ObjectFit {
    pub hypothesis: ObjectHypothesis,
    /// Surface-only stage run after a fresh initialization.
    pub prefit: Option<ConvergenceRecord>,
    pub record: ConvergenceRecord,
    pub inliers: usize,
}

impl ObjectFit {
    /// Convergence records labelled by stage, prefixed with `name`.
    pub fn records(&self, name: &str) -> Vec<(String, ConvergenceRecord)> {
        let mut out = Vec::new();
        if let Some(p) = &self.prefit {
            out.push((format!("{name}_prefit"), p.clone()));
        }
        out.push((name.to_string(), self.record.clone()));
        out
    }
}

/// Tracks the frames, inserting keyframes, triangulating landmarks and
/// associating them with the object. Runs the trigger-time reconstruction
/// once `policy` is met; with `stop_after_trigger` the pass ends there.
pub fn run_frontend(
    config: &RunConfig,
    sim: &Simulation,
    frames: &[Frame],
    stop_after_trigger: bool,
) -> Result<FrontendOutcome, PipelineError> {
    let fp = &config.frontend;
    let k = config.camera;
    let mut graph = FactorGraph::new(k);
    graph.odometry_noise = config.odometry;
    let mut out = FrontendOutcome {
        graph: FactorGraph::new(k),
        tracking: TrackingMonitor::new(fp.tracking_threshold),
        keyframe_frames: Vec::new(),
        keyframe_truth: Vec::new(),
        masks: Vec::new(),
        trigger: None,
        trigger_convergence: Vec::new(),
        frames_processed: 0,
        total_features: 0,
        total_blur: 0.0,
        log: Vec::new(),
    };
    let mut pending: BTreeMap<u64, Pending> = BTreeMap::new();
    let mut lost_since_keyframe = false;
    let min_parallax = fp.min_parallax_deg.to_radians();
    let truth_center = Point3::from(sim.object_pose().translation);

    for frame in frames {
        out.frames_processed += 1;
        out.total_features += frame.features.len();
        out.total_blur += frame.blur_level;
        if out.tracking.update(frame.index, frame.features.len()) == TrackingStatus::Lost {
            lost_since_keyframe = true;
            continue;
        }
        let last = out.keyframe_frames.last().copied();
        let due = match last {
            None => true,
            Some(l) => lost_since_keyframe || frame.index >= l + fp.keyframe_interval,
        };
        if !due {
            continue;
        }
        lost_since_keyframe = false;

        let truth = sim.slam_pose(&frame.pose);
        let estimate = match (last, graph.latest_keyframe()) {
            (Some(l), Some(prev)) => {
                let gap = (frame.index - l) as f64 / fp.keyframe_interval as f64;
                let kscale = (1.0 + frame.blur_level) * gap.sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    config.seed ^ (frame.index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                    "odometry",
                ));
                let nr = Normal::new(0.0, config.odometry.rotation_sigma * kscale).expect("positive sigma");
                let nt = Normal::new(0.0, config.odometry.translation_sigma * kscale).expect("positive sigma");
                let delta = Vector6::from_fn(|i, _| if i < 3 { nr.sample(&mut rng) } else { nt.sample(&mut rng) });
                let rel = out.keyframe_truth.last().expect("truth per keyframe").inverse().compose(&truth);
                prev.pose.compose(&rel).compose(&RigidTransform::from_increment(&delta))
            }
            _ => truth,
        };

        let id = out.keyframe_frames.len() as u64;
        let mut observations = Vec::new();
        let mut fresh = Vec::new();
        for f in &frame.features {
            if graph.map_point(f.landmark_id).is_some() {
                observations.push(Observation {
                    point_id: f.landmark_id,
                    pixel: f.pixel,
                });
            } else {
                fresh.push((f.landmark_id, f.pixel));
            }
        }
        graph.add_keyframe(Keyframe {
            id,
            pose: estimate,
            timestamp: frame.timestamp,
            observations,
            blur_level: frame.blur_level,
        })?;
        out.keyframe_frames.push(frame.index);
        out.keyframe_truth.push(truth);

        for (lm, px) in fresh {
            let p = pending.entry(lm).or_insert(Pending { views: Vec::new() });
            p.views.push((id, px));
            if p.views.len() < 2 {
                continue;
            }
            let posed: Vec<(RigidTransform, Pixel)> = p
                .views
                .iter()
                .map(|(kf, px)| (graph.keyframe(*kf).expect("view keyframe exists").pose, *px))
                .collect();
            let bearing = |(pose, px): &(RigidTransform, Pixel)| pose.rotation * k.pixel_direction(px);
            let parallax = bearing(&posed[0]).angle(&bearing(posed.last().expect("two views")));
            let accepted = if parallax >= min_parallax {
                triangulate(&k, &posed).filter(|x| {
                    posed.iter().all(|(pose, px)| {
                        k.project(&pose.inverse().transform_point(x))
                            .map(|q| (q - px).norm() <= fp.max_reprojection_px)
                            .unwrap_or(false)
                    })
                })
            } else {
                None
            };
            match accepted {
                Some(x) => {
                    let views = std::mem::take(&mut p.views);
                    pending.remove(&lm);
                    graph.add_map_point(lm, x, &views)?;
                }
                None => {
                    if p.views.len() > fp.max_pending_views {
                        p.views.remove(0);
                    }
                }
            }
        }

        let mask = object_mask(&sim.scene, &k, &frame.pose, fp.mask_inflation);
        out.masks.push(mask);
        if let Some(m) = mask {
            if graph.object(OBJECT_ID).is_none() {
                graph.add_object(ObjectHypothesis::new(OBJECT_ID, RigidTransform::identity(), ShapeCode::centered()))?;
                out.log.push(format!("frame {}: object first seen in keyframe {id}", frame.index));
            }
            graph.associate_points(OBJECT_ID, |px| m.contains(px))?;
        }

        if out.trigger.is_none() && graph.object(OBJECT_ID).is_some() && graph.should_reconstruct(&config.trigger, OBJECT_ID)? {
            let report = graph.joint_optimize(&config.joint_weights, &config.joint)?;
            out.log.push(format!(
                "frame {}: trigger at keyframe {id}; joint optimization {:.6e} -> {:.6e} ({:?})",
                frame.index, report.initial_cost, report.final_cost, report.termination
            ));
            match reconstruct_object(&graph, &out.masks, &config.reconstruction) {
                Ok(fit) => {
                    let (hyp, record, inliers) = (&fit.hypothesis, &fit.record, fit.inliers);
                    graph.update_object(hyp)?;
                    graph.set_object_factor(OBJECT_ID, true)?;
                    let info = TriggerInfo {
                        keyframe_count: graph.keyframes().len(),
                        frame_index: frame.index,
                        associated_points: hyp.associated_point_ids.len(),
                        inlier_points: inliers,
                        translation_error: sim.slam_error(&Point3::from(hyp.pose.translation), &truth_center),
                    };
                    out.log.push(format!(
                        "frame {}: reconstruction from {} points ({:?}), center error {:.4} m",
                        frame.index, inliers, record.termination, info.translation_error
                    ));
                    out.trigger = Some(info);
                    out.trigger_convergence = fit.records("trigger");
                    if stop_after_trigger {
                        break;
                    }
                }
                Err(PipelineError::Reconstruction(e @ ReconstructionError::InsufficientObservations { .. })) => {
                    out.log.push(format!("frame {}: reconstruction deferred: {e}", frame.index));
                }
                Err(e) => return Err(e),
            }
        }
    }
    out.tracking.finish();
    out.graph = graph;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub deblur_efficiency: Option<f64>,
    pub frame_count: usize,
    pub keyframe_count: usize,
    pub map_point_count: usize,
    pub mean_features_per_frame: f64,
    pub mean_blur_level: f64,
    pub lost_frame_count: usize,
    pub tracking_lost_intervals: Vec<(usize, usize)>,
    pub trigger: Option<TriggerInfo>,
    pub true_scale: f64,
    pub estimated_scale: f64,
    /// Metric distance between the final and true object centers.
    pub object_translation_error: f64,
    pub metrics: MetricsReport,
}

/// Named outputs of a run. [`run_pipeline`] stores them in a directory;
/// tests can keep them in memory.
pub trait ArtifactSink {
    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<(), ArtifactError>;
}

pub struct DirectorySink {
    pub dir: PathBuf,
}

impl ArtifactSink for DirectorySink {
    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<(), ArtifactError> {
        artifacts::write_file(&self.dir.join(name), bytes)
    }
}

#[derive(Debug, Default, Clone)]
pub struct MemorySink {
    pub files: BTreeMap<String, Vec<u8>>,
}

impl ArtifactSink for MemorySink {
    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<(), ArtifactError> {
        self.files.insert(name.to_string(), bytes.to_vec());
        Ok(())
    }
}

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const MESH_FILE: &str = "mesh.ply";
pub const GROUND_TRUTH_FILE: &str = "gt.ply";
pub const CONVERGENCE_FILE: &str = "convergence.csv";
pub const CALIBRATION_INPUT_FILE: &str = "calibration_input.json";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const LOG_FILE: &str = "run.log";

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s.into_bytes()
}

/// Runs every stage, handing each artifact to `sink` as soon as its stage
/// completes. `frames` replaces the simulated stream when given.
pub fn execute(
    config: &RunConfig,
    frames: Option<Vec<Frame>>,
    sink: &mut dyn ArtifactSink,
    log: &mut Vec<String>,
) -> Result<RunReport, PipelineError> {
    config.validate()?;
    let sim = prepare(config)?;
    log.push(format!(
        "seed {}: {} object and {} background landmarks, {} trajectory frames",
        config.seed,
        sim.scene.object_points.len(),
        sim.scene.background_points.len(),
        sim.trajectory.frames.len()
    ));
    let frames = match frames {
        Some(f) => {
            log.push(format!("ingested {} frames", f.len()));
            f
        }
        None => simulate_frames(config, &sim),
    };

    let mut front = run_frontend(config, &sim, &frames, false)?;
    log.append(&mut front.log);
    log.push(format!(
        "tracking: {} keyframes, {} map points, {} lost intervals",
        front.graph.keyframes().len(),
        front.graph.map_points().len(),
        front.tracking.lost_intervals.len()
    ));
    let mut graph = front.graph.clone();
    let trigger = front.trigger.ok_or_else(|| stage_error("trigger", "reconstruction was never triggered"))?;

    let joint: JointReport = graph.joint_optimize(&config.joint_weights, &config.joint)?;
    log.push(format!(
        "final joint optimization {:.6e} -> {:.6e} in {} iterations ({:?})",
        joint.initial_cost, joint.final_cost, joint.iterations, joint.termination
    ));
    sink.put(TRAJECTORY_FILE, artifacts::trajectory_csv(graph.keyframes()).as_bytes())?;

    let fit = reconstruct_object(&graph, &front.masks, &config.reconstruction)?;
    graph.update_object(&fit.hypothesis)?;
    log.push(format!("final reconstruction from {} points ({:?})", fit.inliers, fit.record.termination));
    let mut stages = front.trigger_convergence.clone();
    stages.extend(fit.records("final"));
    let labelled: Vec<(&str, &ConvergenceRecord)> = stages.iter().map(|(n, r)| (n.as_str(), r)).collect();
    sink.put(CONVERGENCE_FILE, artifacts::convergence_csv(&labelled).as_bytes())?;

    let cal_input = calibration_input(config, &sim, &frames, &front.keyframe_frames, &graph)?;
    sink.put(CALIBRATION_INPUT_FILE, &json_bytes(&cal_input))?;
    let calibration = calibrate(&cal_input)?;
    log.push(format!(
        "calibration: scale {:.6} (true {:.6}), reprojection rms {:.3}/{:.3} px",
        calibration.scale, sim.slam_scale, calibration.reprojection_rms[0], calibration.reprojection_rms[1]
    ));
    sink.put(CALIBRATION_FILE, &json_bytes(&calibration))?;

    let mut object = graph.object(OBJECT_ID).expect("object exists").clone();
    object.status = HypothesisStatus::Converged;
    let to_world = calibration.slam_to_world;
    let mesh = object_mesh_world(&object, &to_world, config.metrics.mesh_resolution)?;
    sink.put(MESH_FILE, &artifacts::ply_bytes(&mesh))?;
    let spec = &sim.scene.spec;
    let gt_cloud: Vec<Point3> = extract_mesh_points(&spec.object_code, config.metrics.mesh_resolution)?
        .iter()
        .map(|p| spec.object_pose.transform_point(p))
        .collect();
    sink.put(GROUND_TRUTH_FILE, &artifacts::ply_bytes(&gt_cloud))?;
    let gt_box = tight_bounding_box(&spec.object_code, &spec.object_pose);
    let metrics = evaluate_run(&object, &to_world, &gt_cloud, &gt_box, &config.metrics)?;

    let lost_frames = front.tracking.lost_intervals.iter().map(|(a, b)| b - a + 1).sum();
    let n = front.frames_processed.max(1) as f64;
    let report = RunReport {
        seed: config.seed,
        deblur_efficiency: config.deblur.map(|d| d.efficiency),
        frame_count: front.frames_processed,
        keyframe_count: graph.keyframes().len(),
        map_point_count: graph.map_points().len(),
        mean_features_per_frame: front.total_features as f64 / n,
        mean_blur_level: front.total_blur / n,
        lost_frame_count: lost_frames,
        tracking_lost_intervals: front.tracking.lost_intervals.clone(),
        trigger: Some(trigger),
        true_scale: sim.slam_scale,
        estimated_scale: calibration.scale,
        object_translation_error: (to_world.transform_point(&Point3::from(object.pose.translation))
            - Point3::from(spec.object_pose.translation))
        .norm(),
        metrics,
    };
    log.push(format!(
        "metrics: points {} P {:.4} R {:.4} F {:.4} rmse {:.4} IoU {:.4}",
        metrics.associated_point_count, metrics.precision, metrics.recall, metrics.f_score, metrics.rmse_sdf, metrics.iou
    ));
    sink.put(METRICS_FILE, &json_bytes(&report))?;
    Ok(report)
}

/// Board observations of the first keyframe and of the first keyframe past
/// `second_frame_min` that sees the whole board.
pub fn calibration_input(
    config: &RunConfig,
    sim: &Simulation,
    frames: &[Frame],
    keyframe_frames: &[usize],
    graph: &FactorGraph,
) -> Result<CalibrationInput, PipelineError> {
    let by_index: BTreeMap<usize, &Frame> = frames.iter().map(|f| (f.index, f)).collect();
    let corners = |kf: usize| by_index.get(&keyframe_frames[kf]).and_then(|f| f.board_corners.clone());
    let first = corners(0).ok_or_else(|| stage_error("calibration", "first keyframe does not see the board"))?;
    let second = (1..keyframe_frames.len())
        .filter(|&i| keyframe_frames[i] >= config.calibration.second_frame_min)
        .find_map(|i| corners(i).map(|c| (i, c)))
        .ok_or_else(|| stage_error("calibration", "no later keyframe sees the whole board"))?;
    Ok(CalibrationInput {
        intrinsics: config.camera,
        board: sim.board,
        frames: [
            CalibrationFrame {
                corners: first,
                slam_pose: graph.keyframes()[0].pose,
            },
            CalibrationFrame {
                corners: second.1,
                slam_pose: graph.keyframes()[second.0].pose,
            },
        ],
    })
}

/// Chessboard calibration on [`calibration_input`].
pub fn calibrate_run(
    config: &RunConfig,
    sim: &Simulation,
    frames: &[Frame],
    keyframe_frames: &[usize],
    graph: &FactorGraph,
) -> Result<CalibrationResult, PipelineError> {
    let input = calibration_input(config, sim, frames, keyframe_frames, graph)?;
    Ok(calibrate(&input)?)
}

/// Paths of a completed run's files.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub trajectory_csv: PathBuf,
    pub mesh_ply: PathBuf,
    pub ground_truth_ply: PathBuf,
    pub convergence_csv: PathBuf,
    pub calibration_input_json: PathBuf,
    pub calibration_json: PathBuf,
    pub metrics_json: PathBuf,
    pub run_log: PathBuf,
}

impl RunArtifacts {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            trajectory_csv: dir.join(TRAJECTORY_FILE),
            mesh_ply: dir.join(MESH_FILE),
            ground_truth_ply: dir.join(GROUND_TRUTH_FILE),
            convergence_csv: dir.join(CONVERGENCE_FILE),
            calibration_input_json: dir.join(CALIBRATION_INPUT_FILE),
            calibration_json: dir.join(CALIBRATION_FILE),
            metrics_json: dir.join(METRICS_FILE),
            run_log: dir.join(LOG_FILE),
        }
    }
}

/// Runs the pipeline into `config.output_dir`. Artifacts of completed
/// stages are kept when a later stage fails; the run log records the error.
pub fn run_pipeline(config: &RunConfig, frames: Option<Vec<Frame>>) -> Result<(RunArtifacts, RunReport), PipelineError> {
    let dir = config
        .output_dir
        .clone()
        .ok_or_else(|| PipelineError::Config("output_dir is required".into()))?;
    std::fs::create_dir_all(&dir).map_err(|source| ArtifactError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut sink = DirectorySink { dir: dir.clone() };
    let mut log = Vec::new();
    let result = execute(config, frames, &mut sink, &mut log);
    if let Err(e) = &result {
        log.push(format!("error: {e}"));
    }
    let mut text = String::new();
    for line in &log {
        writeln!(text, "{line}").expect("string write");
    }
    sink.put(LOG_FILE, text.as_bytes())?;
    result.map(|r| (RunArtifacts::in_dir(&dir), r))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub a: f64,
    pub b: f64,
    pub delta: f64,
    /// `100 · (b − a) / |a|`; `None` when `a` is zero and `b` is not.
    pub percent_change: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn row(&self, metric: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.metric == metric)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<10} {:>12} {:>12} {:>12} {:>10}\n", "metric", "a", "b", "delta", "change");
        for r in &self.rows {
            let pct = r.percent_change.map_or("n/a".to_string(), |p| format!("{p:+.2}%"));
            writeln!(s, "{:<10} {:>12.4} {:>12.4} {:>+12.4} {:>10}", r.metric, r.a, r.b, r.delta, pct).expect("string write");
        }
        s
    }
}

/// Side-by-side deltas of two reports computed with the same evaluation
/// parameters.
pub fn compare_runs(a: &MetricsReport, b: &MetricsReport) -> Result<Comparison, PipelineError> {
    if a.distance_threshold != b.distance_threshold {
        return Err(PipelineError::Mismatch(format!("tau {} vs {}", a.distance_threshold, b.distance_threshold)));
    }
    if a.iou_samples_per_axis != b.iou_samples_per_axis || a.mesh_resolution != b.mesh_resolution {
        return Err(PipelineError::Mismatch(format!(
            "resolution {}/{} vs {}/{}",
            a.iou_samples_per_axis, a.mesh_resolution, b.iou_samples_per_axis, b.mesh_resolution
        )));
    }
    let pairs = [
        ("points", a.associated_point_count as f64, b.associated_point_count as f64),
        ("precision", a.precision, b.precision),
        ("recall", a.recall, b.recall),
        ("f_score", a.f_score, b.f_score),
        ("rmse_sdf", a.rmse_sdf, b.rmse_sdf),
        ("iou", a.iou, b.iou),
    ];
    let rows = pairs
        .iter()
        .map(|(m, x, y)| ComparisonRow {
            metric: m.to_string(),
            a: *x,
            b: *y,
            delta: y - x,
            percent_change: if x != &0.0 {
                Some(100.0 * (y - x) / x.abs())
            } else if y == x {
                Some(0.0)
            } else {
                None
            },
        })
        .collect();
    Ok(Comparison { rows })
}

/// Reads a metrics file written by a run, or a bare metrics report.
pub fn load_metrics(path: &Path) -> Result<MetricsReport, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|source| ArtifactError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if let Ok(r) = serde_json::from_str::<RunReport>(&text) {
        return Ok(r.metrics);
    }
    serde_json::from_str::<MetricsReport>(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
}
