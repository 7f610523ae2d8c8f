//! Metric scale recovery and SLAM-to-world alignment from two views of a
//! chessboard.
//!
//! Board poses are `T_cam_board` (board points into camera coordinates), as
//! returned by [`solve_pnp`]. SLAM poses in a [`CalibrationFramePair`] are
//! `T_cam_slam`. The camera center of a `T_cam_x` transform is `-Rᵀ t`.

use nalgebra::{DMatrix, Matrix3, Matrix6, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    skew, CameraIntrinsics, GeometryError, Pixel, Point3, RigidTransform, SimilarityTransform,
    Vec3,
};

/// Minimum correspondences accepted by [`solve_pnp`].
pub const MIN_PNP_POINTS: usize = 6;
/// SLAM-frame baselines below this are rejected.
pub const MIN_BASELINE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("need at least {MIN_PNP_POINTS} correspondences, got {0}")]
    TooFewPoints(usize),
    #[error("{object} object points but {image} image points")]
    CountMismatch { object: usize, image: usize },
    #[error("degenerate point configuration: {0}")]
    Degenerate(&'static str),
    #[error("degenerate baseline: SLAM camera centers {0:e} apart")]
    DegenerateBaseline(f64),
    #[error("invalid chessboard: {0}")]
    InvalidBoard(String),
    #[error("invalid scale {0}")]
    InvalidScale(f64),
    #[error("frame {frame}: {found} corners, board has {expected}")]
    CornerCount { frame: usize, found: usize, expected: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChessboardSpec {
    pub inner_rows: usize,
    pub inner_cols: usize,
    /// Edge length of one square (meters).
    pub square_size: f64,
    /// `T_world_board`.
    pub board_pose: RigidTransform,
}

impl ChessboardSpec {
    pub fn new(
        inner_rows: usize,
        inner_cols: usize,
        square_size: f64,
        board_pose: RigidTransform,
    ) -> Result<Self, CalibrationError> {
        let b = Self {
            inner_rows,
            inner_cols,
            square_size,
            board_pose,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), CalibrationError> {
        if self.inner_rows < 2 || self.inner_cols < 2 {
            return Err(CalibrationError::InvalidBoard(format!(
                "need at least 2x2 inner corners, got {}x{}",
                self.inner_rows, self.inner_cols
            )));
        }
        if !(self.square_size > 0.0 && self.square_size.is_finite()) {
            return Err(CalibrationError::InvalidBoard(format!(
                "square size must be positive, got {}",
                self.square_size
            )));
        }
        if !self.board_pose.is_finite() {
            return Err(GeometryError::NonFinite("board pose").into());
        }
        Ok(())
    }

    pub fn corner_count(&self) -> usize {
        self.inner_rows * self.inner_cols
    }

    /// Inner corners in the board frame, row-major, on the `z = 0` plane.
    pub fn grid_points(&self) -> Vec<Point3> {
        (0..self.inner_rows)
            .flat_map(|r| {
                (0..self.inner_cols).map(move |c| {
                    Point3::new(c as f64 * self.square_size, r as f64 * self.square_size, 0.0)
                })
            })
            .collect()
    }

    /// Center of the corner grid in the board frame.
    pub fn grid_center(&self) -> Point3 {
        Point3::new(
            (self.inner_cols - 1) as f64 * self.square_size / 2.0,
            (self.inner_rows - 1) as f64 * self.square_size / 2.0,
            0.0,
        )
    }
}

/// Board and SLAM poses of the two calibration frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationFramePair {
    /// `T_cam1_board`.
    pub p1_cb: RigidTransform,
    /// `T_cam2_board`.
    pub p2_cb: RigidTransform,
    /// `T_cam1_slam`.
    pub p1_cs: RigidTransform,
    /// `T_cam2_slam`.
    pub p2_cs: RigidTransform,
}

impl CalibrationFramePair {
    /// Builds a pair from board PnP results and SLAM keyframe poses given
    /// as `T_slam_cam`.
    pub fn from_keyframe_poses(
        p1_cb: RigidTransform,
        p2_cb: RigidTransform,
        slam_cam1: &RigidTransform,
        slam_cam2: &RigidTransform,
    ) -> Self {
        Self {
            p1_cb,
            p2_cb,
            p1_cs: slam_cam1.inverse(),
            p2_cs: slam_cam2.inverse(),
        }
    }

    fn validate(&self) -> Result<(), CalibrationError> {
        for (t, name) in [
            (&self.p1_cb, "P1cb"),
            (&self.p2_cb, "P2cb"),
            (&self.p1_cs, "P1cs"),
            (&self.p2_cs, "P2cs"),
        ] {
            if !t.is_finite() {
                return Err(GeometryError::NonFinite(name).into());
            }
        }
        Ok(())
    }
}

/// Camera center `-Rᵀ t` of a `T_cam_x` transform, in frame `x`.
pub fn camera_center(t_cam_x: &RigidTransform) -> Point3 {
    Point3::from(-(t_cam_x.rotation.inverse() * t_cam_x.translation))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PnpSolution {
    /// `T_cam_board`.
    pub pose: RigidTransform,
    /// Reprojection RMS of the refined pose (pixels).
    pub rms: f64,
    /// Reprojection RMS of the linear initialization (pixels).
    pub initial_rms: f64,
    pub iterations: usize,
}

fn reprojection_rms(obj: &[Point3], img: &[Pixel], k: &CameraIntrinsics, pose: &RigidTransform) -> f64 {
    let mut sum = 0.0;
    for (p, u) in obj.iter().zip(img) {
        let pc = pose.transform_point(p);
        if pc.z <= 1e-9 {
            return f64::INFINITY;
        }
        let px = Pixel::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy);
        sum += (px - u).norm_squared();
    }
    (sum / obj.len() as f64).sqrt()
}

/// Similarity normalization moving the centroid to the origin with mean
/// distance `sqrt(dim)`.
fn normalizer<const D: usize>(pts: &[[f64; D]]) -> ([f64; D], f64) {
    let n = pts.len() as f64;
    let mut c = [0.0; D];
    for p in pts {
        for i in 0..D {
            c[i] += p[i] / n;
        }
    }
    let mean_dist = pts
        .iter()
        .map(|p| (0..D).map(|i| (p[i] - c[i]).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / n;
    let s = if mean_dist > 0.0 { (D as f64).sqrt() / mean_dist } else { 1.0 };
    (c, s)
}

fn null_vector(a: &DMatrix<f64>) -> nalgebra::DVector<f64> {
    let svd = a.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    v_t.row(imin).transpose()
}

fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let imin = svd.singular_values.imin();
        let mut u2 = u;
        u2.column_mut(imin).neg_mut();
        r = u2 * v_t;
    }
    r
}

fn rigid_from_matrix(r: &Matrix3<f64>, t: Vec3) -> RigidTransform {
    let rot = nalgebra::Rotation3::from_matrix_unchecked(*r);
    RigidTransform::new(nalgebra::UnitQuaternion::from_rotation_matrix(&rot), t)
}

/// Planar initialization: homography from plane coordinates to normalized
/// image coordinates, decomposed into `[r1 r2 t]`.
fn init_planar(
    plane_uv: &[[f64; 2]],
    norm_img: &[[f64; 2]],
) -> Result<(Matrix3<f64>, Vec3), CalibrationError> {
    let (co, so) = normalizer(plane_uv);
    let (ci, si) = normalizer(norm_img);
    let n = plane_uv.len();
    let mut a = DMatrix::zeros(2 * n, 9);
    for (i, (p, q)) in plane_uv.iter().zip(norm_img).enumerate() {
        let (x, y) = ((p[0] - co[0]) * so, (p[1] - co[1]) * so);
        let (u, v) = ((q[0] - ci[0]) * si, (q[1] - ci[1]) * si);
        let r0 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        let r1 = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, -u];
        for j in 0..9 {
            a[(2 * i, j)] = r0[j];
            a[(2 * i + 1, j)] = r1[j];
        }
    }
    let h = null_vector(&a);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let t_obj = Matrix3::new(so, 0.0, -so * co[0], 0.0, so, -so * co[1], 0.0, 0.0, 1.0);
    let t_img_inv = Matrix3::new(1.0 / si, 0.0, ci[0], 0.0, 1.0 / si, ci[1], 0.0, 0.0, 1.0);
    let hm = t_img_inv * hn * t_obj;
    let (h1, h2, h3) = (hm.column(0).into_owned(), hm.column(1).into_owned(), hm.column(2).into_owned());
    let norm = 0.5 * (h1.norm() + h2.norm());
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(CalibrationError::Degenerate("homography"));
    }
    let mut lambda = 1.0 / norm;
    if h3.z * lambda < 0.0 {
        lambda = -lambda;
    }
    let r1 = h1 * lambda;
    let r2 = h2 * lambda;
    let r = nearest_rotation(&Matrix3::from_columns(&[r1, r2, r1.cross(&r2)]));
    Ok((r, h3 * lambda))
}

/// General 3D initialization by DLT of the 3x4 normalized projection.
fn init_dlt(obj: &[[f64; 3]], norm_img: &[[f64; 2]]) -> Result<(Matrix3<f64>, Vec3), CalibrationError> {
    let (co, so) = normalizer(obj);
    let (ci, si) = normalizer(norm_img);
    let n = obj.len();
    let mut a = DMatrix::zeros(2 * n, 12);
    for (i, (p, q)) in obj.iter().zip(norm_img).enumerate() {
        let x = [(p[0] - co[0]) * so, (p[1] - co[1]) * so, (p[2] - co[2]) * so, 1.0];
        let (u, v) = ((q[0] - ci[0]) * si, (q[1] - ci[1]) * si);
        for j in 0..4 {
            a[(2 * i, j)] = x[j];
            a[(2 * i, 8 + j)] = -u * x[j];
            a[(2 * i + 1, 4 + j)] = x[j];
            a[(2 * i + 1, 8 + j)] = -v * x[j];
        }
    }
    let m = null_vector(&a);
    let pn = nalgebra::Matrix3x4::from_row_slice(m.as_slice());
    let mut t_obj = nalgebra::Matrix4::identity() * so;
    t_obj[(3, 3)] = 1.0;
    for i in 0..3 {
        t_obj[(i, 3)] = -so * co[i];
    }
    let t_img_inv = Matrix3::new(1.0 / si, 0.0, ci[0], 0.0, 1.0 / si, ci[1], 0.0, 0.0, 1.0);
    let mut p = t_img_inv * pn * t_obj;
    let left = p.fixed_view::<3, 3>(0, 0).into_owned();
    if left.determinant() < 0.0 {
        p = -p;
    }
    let left = p.fixed_view::<3, 3>(0, 0).into_owned();
    let sv = left.svd(false, false).singular_values;
    let lambda = sv.mean();
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(CalibrationError::Degenerate("projection matrix"));
    }
    Ok((nearest_rotation(&left), p.column(3).into_owned() / lambda))
}

/// Estimates `T_cam_board` from 2D-3D correspondences.
///
/// Planar targets use a homography initialization, general targets a DLT;
/// both are refined by Levenberg-Marquardt on the pixel reprojection error.
/// The refined RMS never exceeds the initial RMS because only decreasing
/// steps are accepted.
pub fn solve_pnp(
    object_points: &[Point3],
    image_points: &[Pixel],
    k: &CameraIntrinsics,
) -> Result<PnpSolution, CalibrationError> {
    if object_points.len() != image_points.len() {
        return Err(CalibrationError::CountMismatch {
            object: object_points.len(),
            image: image_points.len(),
        });
    }
    let n = object_points.len();
    if n < MIN_PNP_POINTS {
        return Err(CalibrationError::TooFewPoints(n));
    }
    k.validate()?;
    if object_points.iter().any(|p| !p.coords.iter().all(|v| v.is_finite()))
        || image_points.iter().any(|p| !(p.x.is_finite() && p.y.is_finite()))
    {
        return Err(GeometryError::NonFinite("pnp correspondences").into());
    }

    let centroid = Point3::from(object_points.iter().map(|p| p.coords).sum::<Vec3>() / n as f64);
    let mut cov = Matrix3::zeros();
    for p in object_points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let (l0, l1, l2) = (
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    if l0 <= 0.0 || l1 <= 1e-12 * l0 {
        return Err(CalibrationError::Degenerate("object points are collinear"));
    }
    let norm_img: Vec<[f64; 2]> = image_points
        .iter()
        .map(|u| [(u.x - k.cx) / k.fx, (u.y - k.cy) / k.fy])
        .collect();

    let init = if l2 <= 1e-12 * l0 {
        // frame on the plane: T_board_plane
        let e0 = eig.eigenvectors.column(order[0]).into_owned();
        let e1 = eig.eigenvectors.column(order[1]).into_owned();
        let basis = nearest_rotation(&Matrix3::from_columns(&[e0, e1, e0.cross(&e1)]));
        let board_plane = rigid_from_matrix(&basis, centroid.coords);
        let plane_board = board_plane.inverse();
        let uv: Vec<[f64; 2]> = object_points
            .iter()
            .map(|p| {
                let q = plane_board.transform_point(p);
                [q.x, q.y]
            })
            .collect();
        let (r, t) = init_planar(&uv, &norm_img)?;
        rigid_from_matrix(&r, t).compose(&plane_board)
    } else {
        let obj: Vec<[f64; 3]> = object_points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let (r, t) = init_dlt(&obj, &norm_img)?;
        rigid_from_matrix(&r, t)
    };

    let initial_rms = reprojection_rms(object_points, image_points, k, &init);
    let (pose, rms, iterations) = refine_pnp(object_points, image_points, k, init, initial_rms);
    Ok(PnpSolution {
        pose,
        rms,
        initial_rms,
        iterations,
    })
}

fn refine_pnp(
    obj: &[Point3],
    img: &[Pixel],
    k: &CameraIntrinsics,
    init: RigidTransform,
    init_rms: f64,
) -> (RigidTransform, f64, usize) {
    let n = obj.len() as f64;
    let mut pose = init;
    let mut cost = init_rms * init_rms * n;
    if !cost.is_finite() {
        return (pose, init_rms, 0);
    }
    let mut damping = 1e-3;
    let mut iterations = 0;
    for it in 0..100 {
        iterations = it + 1;
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for (p, u) in obj.iter().zip(img) {
            let pc = pose.transform_point(p);
            let iz = 1.0 / pc.z;
            let r = nalgebra::Vector2::new(k.fx * pc.x * iz + k.cx - u.x, k.fy * pc.y * iz + k.cy - u.y);
            let dproj = nalgebra::Matrix2x3::new(
                k.fx * iz,
                0.0,
                -k.fx * pc.x * iz * iz,
                0.0,
                k.fy * iz,
                -k.fy * pc.y * iz * iz,
            );
            // left perturbation Exp(δ)∘T
            let mut dp = nalgebra::Matrix3x6::zeros();
            dp.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&pc.coords)));
            dp.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
            let j = dproj * dp;
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        if jtr.amax() < 1e-12 {
            break;
        }
        let mut accepted = false;
        while damping < 1e12 {
            let mut a = jtj;
            for i in 0..6 {
                a[(i, i)] += damping * jtj[(i, i)].max(1e-12);
            }
            let Some(chol) = a.cholesky() else {
                damping *= 10.0;
                continue;
            };
            let delta = -chol.solve(&jtr);
            let cand = RigidTransform::from_increment(&delta).compose(&pose);
            let c = reprojection_rms(obj, img, k, &cand).powi(2) * n;
            if c < cost {
                let rel = (cost - c) / cost.max(1e-300);
                pose = cand;
                cost = c;
                damping = (damping * 0.5).max(1e-12);
                accepted = true;
                if rel < 1e-14 || delta.norm() < 1e-14 {
                    return (pose, (cost / n).sqrt(), iterations);
                }
                break;
            }
            damping *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    (pose, (cost / n).sqrt(), iterations)
}

/// Ratio of the metric camera baseline to the SLAM-frame baseline.
pub fn estimate_scale(pair: &CalibrationFramePair) -> Result<f64, CalibrationError> {
    pair.validate()?;
    let slam = (camera_center(&pair.p1_cs) - camera_center(&pair.p2_cs)).norm();
    if !(slam >= MIN_BASELINE) {
        return Err(CalibrationError::DegenerateBaseline(slam));
    }
    let metric = (camera_center(&pair.p1_cb) - camera_center(&pair.p2_cb)).norm();
    let s = metric / slam;
    if !(s > 0.0 && s.is_finite()) {
        return Err(CalibrationError::InvalidScale(s));
    }
    Ok(s)
}

/// `T_world_slam = T_world_board ∘ T_board_cam1 ∘ scale(s) ∘ T_cam1_slam`.
pub fn align_frames(
    pair: &CalibrationFramePair,
    board: &ChessboardSpec,
    s: f64,
) -> Result<SimilarityTransform, CalibrationError> {
    board.validate()?;
    pair.validate()?;
    if !(s > 0.0 && s.is_finite()) {
        return Err(CalibrationError::InvalidScale(s));
    }
    let world_cam = SimilarityTransform::from_rigid(board.board_pose.compose(&pair.p1_cb.inverse()));
    let scale = SimilarityTransform::new(s, RigidTransform::identity())?;
    let cam_slam = SimilarityTransform::from_rigid(pair.p1_cs);
    Ok(world_cam.compose(&scale).compose(&cam_slam))
}

/// One calibration frame as provided in a calibration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationFrame {
    /// Detected inner corners, row-major as in [`ChessboardSpec::grid_points`].
    pub corners: Vec<[f64; 2]>,
    /// Camera pose in the SLAM frame, `T_slam_cam`.
    pub slam_pose: RigidTransform,
}

/// Calibration file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationInput {
    pub intrinsics: CameraIntrinsics,
    pub board: ChessboardSpec,
    pub frames: [CalibrationFrame; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationResult {
    pub scale: f64,
    /// `T_world_slam`.
    pub slam_to_world: SimilarityTransform,
    /// Reprojection RMS of the two PnP solutions (pixels).
    pub reprojection_rms: [f64; 2],
}

/// Runs PnP on both frames, then scale estimation and alignment.
pub fn calibrate(input: &CalibrationInput) -> Result<CalibrationResult, CalibrationError> {
    input.board.validate()?;
    let grid = input.board.grid_points();
    let mut poses = [RigidTransform::identity(); 2];
    let mut rms = [0.0; 2];
    for (i, frame) in input.frames.iter().enumerate() {
        if frame.corners.len() != grid.len() {
            return Err(CalibrationError::CornerCount {
                frame: i + 1,
                found: frame.corners.len(),
                expected: grid.len(),
            });
        }
        let px: Vec<Pixel> = frame.corners.iter().map(|c| Pixel::new(c[0], c[1])).collect();
        let sol = solve_pnp(&grid, &px, &input.intrinsics)?;
        poses[i] = sol.pose;
        rms[i] = sol.rms;
    }
    let pair = CalibrationFramePair::from_keyframe_poses(
        poses[0],
        poses[1],
        &input.frames[0].slam_pose,
        &input.frames[1].slam_pose,
    );
    let scale = estimate_scale(&pair)?;
    let slam_to_world = align_frames(&pair, &input.board, scale)?;
    Ok(CalibrationResult {
        scale,
        slam_to_world,
        reprojection_rms: rms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::look_at;
    use nalgebra::UnitQuaternion;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn board() -> ChessboardSpec {
        ChessboardSpec::new(6, 9, 0.05, RigidTransform::identity()).unwrap()
    }

    /// `T_cam_board` for a camera at `eye` (board frame) looking at the
    /// board center.
    fn view(b: &ChessboardSpec, eye: Point3) -> RigidTransform {
        look_at(&eye, &b.grid_center(), &Vec3::new(0.0, -1.0, 0.0)).inverse()
    }

    fn project_all(pose: &RigidTransform, pts: &[Point3], k: &CameraIntrinsics) -> Vec<Pixel> {
        pts.iter().map(|p| k.project(&pose.transform_point(p)).unwrap()).collect()
    }

    fn random_view(rng: &mut impl Rng, b: &ChessboardSpec, range: f64) -> RigidTransform {
        let c = b.grid_center();
        let eye = c + Vec3::new(
            rng.random_range(-0.4..0.4) * range,
            rng.random_range(-0.4..0.4) * range,
            -range,
        );
        view(b, eye)
    }

    #[test]
    fn noiseless_pnp_recovers_pose() {
        let k = intrinsics();
        let b = board();
        let grid = b.grid_points();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let range = rng.random_range(0.5..2.0);
            let truth = random_view(&mut rng, &b, range);
            let px = project_all(&truth, &grid, &k);
            let sol = solve_pnp(&grid, &px, &k).unwrap();
            assert!(sol.pose.rotation_angle_to(&truth) < 1e-6);
            assert!((sol.pose.translation - truth.translation).norm() < 1e-6);
            assert!(sol.rms < 1e-8, "{}", sol.rms);
            assert!(sol.rms <= sol.initial_rms);
        }
    }

    #[test]
    fn fronto_parallel_board_at_one_meter() {
        let k = intrinsics();
        let b = board();
        let grid = b.grid_points();
        let truth = RigidTransform::from_translation(Vec3::new(-0.2, -0.125, 1.0));
        let sol = solve_pnp(&grid, &project_all(&truth, &grid, &k), &k).unwrap();
        assert!((sol.pose.translation.z - 1.0).abs() < 1e-9);
        assert!(sol.pose.rotation.angle() < 1e-9);
    }

    #[test]
    fn non_planar_pnp() {
        let k = intrinsics();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Point3> = (0..20)
            .map(|_| Point3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)))
            .collect();
        let truth = RigidTransform::new(UnitQuaternion::from_euler_angles(0.2, -0.1, 0.3), Vec3::new(0.1, 0.0, 3.0));
        let sol = solve_pnp(&pts, &project_all(&truth, &pts, &k), &k).unwrap();
        assert!(sol.pose.rotation_angle_to(&truth) < 1e-6);
        assert!((sol.pose.translation - truth.translation).norm() < 1e-6);
    }

    #[test]
    fn pnp_errors() {
        let k = intrinsics();
        let pts: Vec<Point3> = (0..5).map(|i| Point3::new(i as f64, (i * i) as f64, 0.0)).collect();
        let px = vec![Pixel::new(1.0, 1.0); 5];
        assert_eq!(solve_pnp(&pts, &px, &k), Err(CalibrationError::TooFewPoints(5)));
        let line: Vec<Point3> = (0..8).map(|i| Point3::new(i as f64 * 0.1, 0.0, 0.0)).collect();
        let px = vec![Pixel::new(1.0, 1.0); 8];
        assert!(matches!(solve_pnp(&line, &px, &k), Err(CalibrationError::Degenerate(_))));
        assert!(matches!(solve_pnp(&line, &px[..7], &k), Err(CalibrationError::CountMismatch { .. })));
    }

    #[test]
    fn noisy_pnp_median_errors() {
        let k = intrinsics();
        let b = board();
        let grid = b.grid_points();
        let noise = Normal::new(0.0, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rot = Vec::new();
        let mut trans = Vec::new();
        for _ in 0..100 {
            let truth = random_view(&mut rng, &b, 1.0);
            let px: Vec<Pixel> = project_all(&truth, &grid, &k)
                .into_iter()
                .map(|p| Pixel::new(p.x + noise.sample(&mut rng), p.y + noise.sample(&mut rng)))
                .collect();
            let sol = solve_pnp(&grid, &px, &k).unwrap();
            rot.push(sol.pose.rotation_angle_to(&truth).to_degrees());
            trans.push((sol.pose.translation - truth.translation).norm() / truth.translation.norm());
        }
        rot.sort_by(f64::total_cmp);
        trans.sort_by(f64::total_cmp);
        assert!(rot[50] < 0.5, "median rotation error {}°", rot[50]);
        assert!(trans[50] < 0.01, "median translation error {}", trans[50]);
    }

    fn pair_from_centers(m1: Point3, m2: Point3, s1: Point3, s2: Point3) -> CalibrationFramePair {
        let at = |c: Point3| RigidTransform::from_translation(-c.coords);
        CalibrationFramePair { p1_cb: at(m1), p2_cb: at(m2), p1_cs: at(s1), p2_cs: at(s2) }
    }

    #[test]
    fn scale_examples() {
        let p = pair_from_centers(Point3::origin(), Point3::new(2.0, 0.0, 0.0), Point3::origin(), Point3::new(0.0, 1.0, 0.0));
        assert_eq!(estimate_scale(&p).unwrap(), 2.0);
        let p = pair_from_centers(Point3::origin(), Point3::new(1.5, 0.0, 0.0), Point3::origin(), Point3::new(0.0, 0.0, 1.5));
        assert_eq!(estimate_scale(&p).unwrap(), 1.0);
        let p = pair_from_centers(Point3::origin(), Point3::new(1.0, 0.0, 0.0), Point3::origin(), Point3::new(0.0, 0.0, 1e-7));
        assert!(matches!(estimate_scale(&p), Err(CalibrationError::DegenerateBaseline(_))));
    }

    #[test]
    fn camera_center_uses_rotation() {
        let t = RigidTransform::new(UnitQuaternion::from_euler_angles(0.0, 0.5, 0.0), Vec3::new(1.0, 2.0, 3.0));
        let c = camera_center(&t);
        assert!(t.transform_point(&c).coords.norm() < 1e-12);
    }

    #[test]
    fn injected_scale_recovered_noiselessly() {
        let k = intrinsics();
        let b = ChessboardSpec::new(
            6,
            9,
            0.05,
            RigidTransform::new(UnitQuaternion::from_euler_angles(1.2, 0.1, 0.4), Vec3::new(3.0, -1.0, 0.5)),
        )
        .unwrap();
        let grid = b.grid_points();
        let s_true = 3.7;
        // SLAM frame: arbitrary similarity of the world
        let world_slam = SimilarityTransform::new(
            s_true,
            RigidTransform::new(UnitQuaternion::from_euler_angles(0.3, -0.7, 2.0), Vec3::new(-4.0, 2.0, 1.0)),
        )
        .unwrap();
        let slam_world = world_slam.inverse();
        let c = b.grid_center();
        let views = [view(&b, c + Vec3::new(-0.4, 0.1, -1.0)), view(&b, c + Vec3::new(0.5, -0.1, -1.1))];
        let mut frames = Vec::new();
        for cam_board in &views {
            let world_cam = b.board_pose.compose(&cam_board.inverse());
            // camera pose in SLAM: rotation of slam_world, position mapped by it
            let slam_cam = slam_world.transform_pose(&world_cam);
            let px = project_all(cam_board, &grid, &k);
            frames.push(CalibrationFrame {
                corners: px.iter().map(|p| [p.x, p.y]).collect(),
                slam_pose: slam_cam,
            });
        }
        let input = CalibrationInput { intrinsics: k, board: b, frames: [frames[0].clone(), frames[1].clone()] };
        let res = calibrate(&input).unwrap();
        assert!((res.scale - s_true).abs() / s_true < 1e-9, "{}", res.scale);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let w = Point3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let back = res.slam_to_world.transform_point(&slam_world.transform_point(&w));
            assert!((back - w).norm() < 1e-8);
        }
        let json = serde_json::to_string(&input).unwrap();
        let again: CalibrationInput = serde_json::from_str(&json).unwrap();
        assert!((calibrate(&again).unwrap().scale - s_true).abs() < 1e-8);
    }

    #[test]
    fn align_examples() {
        let b = ChessboardSpec::new(2, 2, 0.1, RigidTransform::identity()).unwrap();
        let cam = RigidTransform::new(UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3), Vec3::new(0.3, 0.1, 1.0));
        // SLAM frame equals world (= board frame)
        let pair = CalibrationFramePair { p1_cb: cam, p2_cb: cam, p1_cs: cam, p2_cs: cam };
        let sim = align_frames(&pair, &b, 1.0).unwrap();
        assert!((sim.scale() - 1.0).abs() < 1e-12);
        assert!(sim.rigid.translation.norm() < 1e-12 && sim.rigid.rotation.angle() < 1e-12);
        // world = SLAM shifted by (5, 0, 0)
        let b5 = ChessboardSpec::new(2, 2, 0.1, RigidTransform::from_translation(Vec3::new(5.0, 0.0, 0.0))).unwrap();
        let sim = align_frames(&pair, &b5, 1.0).unwrap();
        assert!((sim.rigid.translation - Vec3::new(5.0, 0.0, 0.0)).norm() < 1e-12);
        assert!(sim.rigid.rotation.angle() < 1e-12);
        // frame-1 camera center maps to its world position
        let center_world = b5.board_pose.transform_point(&camera_center(&cam));
        assert!((sim.transform_point(&camera_center(&pair.p1_cs)) - center_world).norm() < 1e-9);
        let round = sim.compose(&sim.inverse());
        assert!((round.scale() - 1.0).abs() < 1e-12 && round.rigid.translation.norm() < 1e-9 && round.rigid.rotation.angle() < 1e-9);
        assert!(matches!(align_frames(&pair, &b, 0.0), Err(CalibrationError::InvalidScale(_))));
    }

    fn arb_transform() -> impl Strategy<Value = RigidTransform> {
        (prop::array::uniform3(-3.0..3.0f64), prop::array::uniform3(-5.0..5.0f64))
            .prop_map(|(w, t)| RigidTransform::new(UnitQuaternion::from_scaled_axis(Vec3::from(w)), Vec3::from(t)))
    }

    fn scaled(t: &RigidTransform, k: f64) -> RigidTransform {
        RigidTransform { rotation: t.rotation, translation: t.translation * k }
    }

    proptest! {
        #[test]
        fn scale_is_inverse_in_slam_translation(a in arb_transform(), b in arb_transform(), c in arb_transform(), d in arb_transform(), e in -4i32..4) {
            let pair = CalibrationFramePair { p1_cb: a, p2_cb: b, p1_cs: c, p2_cs: d };
            prop_assume!((camera_center(&c) - camera_center(&d)).norm() > 1e-3);
            let s = estimate_scale(&pair).unwrap();
            // powers of two keep the rescaling exact in floating point
            let k = 2f64.powi(e);
            let pk = CalibrationFramePair { p1_cs: scaled(&c, k), p2_cs: scaled(&d, k), ..pair };
            prop_assert_eq!(estimate_scale(&pk).unwrap(), s / k);
            let kr = 1.37;
            let pr = CalibrationFramePair { p1_cs: scaled(&c, kr), p2_cs: scaled(&d, kr), ..pair };
            prop_assert!((estimate_scale(&pr).unwrap() - s / kr).abs() <= 1e-12 * s);
            let swapped = CalibrationFramePair { p1_cb: b, p2_cb: a, p1_cs: d, p2_cs: c };
            prop_assert!((estimate_scale(&swapped).unwrap() - s).abs() <= 1e-14 * s);
        }

        #[test]
        fn align_round_trip(a in arb_transform(), c in arb_transform(), s in 0.1..10.0f64) {
            let b = ChessboardSpec::new(3, 4, 0.1, a).unwrap();
            let pair = CalibrationFramePair { p1_cb: c, p2_cb: c, p1_cs: a, p2_cs: c };
            let sim = align_frames(&pair, &b, s).unwrap();
            let id = sim.compose(&sim.inverse());
            prop_assert!((id.scale() - 1.0).abs() < 1e-9);
            prop_assert!(id.rigid.translation.norm() < 1e-9);
            prop_assert!(id.rigid.rotation.angle() < 1e-9);
        }
    }
}
