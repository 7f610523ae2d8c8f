//! Object reconstruction energy and its optimizer.
//!
//! ```text
//! E = λs·E_surf + λr·E_rend + λc·‖z_norm‖²
//! ```
//!
//! `E_surf` is the mean squared sdf of the associated world points mapped
//! into the object frame. `E_rend` is a per-ray rendering loss: for
//! in-mask rays with a depth, the squared difference between the
//! sphere-traced hit depth and the observed depth; for rays outside the
//! segmentation mask, a squared hinge on how deeply the shape reaches into
//! the ray. `z_norm` is the shape code mapped onto `[-1, 1]` over its bounds.
//!
//! Pose and code are optimized jointly by damped Gauss-Newton (Levenberg)
//! on the stacked residuals.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{skew, Point3, Ray, RigidTransform, Vec3};
use crate::sdf::{sdf_eval, sdf_gradient, ShapeCode, CODE_DIM};

const POSE_DIM: usize = 6;
const PARAM_DIM: usize = POSE_DIM + CODE_DIM;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReconstructionError {
    #[error("surface energy needs at least one point")]
    EmptyPoints,
    #[error("render energy needs at least one observation")]
    EmptyObservations,
    #[error("insufficient observations: {got} associated points, need {need}")]
    InsufficientObservations { got: usize, need: usize },
    #[error("optimizer diverged at iteration {iteration}")]
    Diverged {
        iteration: usize,
        last_valid: Box<ObjectHypothesis>,
    },
    #[error("invalid energy weights: {0}")]
    InvalidWeights(String),
    #[error("hypothesis must be in the reconstructing state, found {0:?}")]
    InvalidStatus(HypothesisStatus),
    #[error("invalid render observation: {0}")]
    InvalidObservation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyWeights {
    pub lambda_s: f64,
    pub lambda_r: f64,
    pub lambda_c: f64,
}

impl Default for EnergyWeights {
    fn default() -> Self {
        Self {
            lambda_s: 1.0,
            lambda_r: 0.5,
            lambda_c: 0.01,
        }
    }
}

impl EnergyWeights {
    pub fn new(lambda_s: f64, lambda_r: f64, lambda_c: f64) -> Result<Self, ReconstructionError> {
        let w = Self {
            lambda_s,
            lambda_r,
            lambda_c,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), ReconstructionError> {
        let all = [self.lambda_s, self.lambda_r, self.lambda_c];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(ReconstructionError::InvalidWeights(format!(
                "weights must be finite and non-negative, got {all:?}"
            )));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(ReconstructionError::InvalidWeights(
                "at least one weight must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HypothesisStatus {
    Pending,
    Reconstructing,
    Converged,
    Failed,
}

/// Object pose (`T_world_object`), shape code and supporting map points.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectHypothesis {
    pub id: u64,
    pub pose: RigidTransform,
    pub code: ShapeCode,
    pub associated_point_ids: BTreeSet<u64>,
    pub status: HypothesisStatus,
}

impl ObjectHypothesis {
    pub fn new(id: u64, pose: RigidTransform, code: ShapeCode) -> Self {
        Self {
            id,
            pose,
            code,
            associated_point_ids: BTreeSet::new(),
            status: HypothesisStatus::Pending,
        }
    }

    /// Moves a pending hypothesis into the reconstructing state. Requires at
    /// least one associated point.
    pub fn begin_reconstruction(&mut self) -> Result<(), ReconstructionError> {
        if self.associated_point_ids.is_empty() {
            return Err(ReconstructionError::InsufficientObservations { got: 0, need: 1 });
        }
        self.status = HypothesisStatus::Reconstructing;
        Ok(())
    }

    pub fn world_to_object(&self, p: &Point3) -> Point3 {
        self.pose.inverse().transform_point(p)
    }
}

/// A viewing ray in the world frame with its segmentation label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderObservation {
    pub ray: Ray,
    pub in_mask: bool,
    /// Distance along the ray to the observed surface.
    pub observed_depth: Option<f64>,
}

impl RenderObservation {
    pub fn new(ray: Ray, in_mask: bool, observed_depth: Option<f64>) -> Result<Self, ReconstructionError> {
        if let Some(d) = observed_depth {
            if !in_mask {
                return Err(ReconstructionError::InvalidObservation(
                    "depth given for a ray outside the mask".into(),
                ));
            }
            if !(d.is_finite() && d > 0.0) {
                return Err(ReconstructionError::InvalidObservation(format!(
                    "observed depth must be positive, got {d}"
                )));
            }
        }
        Ok(Self {
            ray,
            in_mask,
            observed_depth,
        })
    }

    pub fn depth(ray: Ray, depth: f64) -> Result<Self, ReconstructionError> {
        Self::new(ray, true, Some(depth))
    }

    pub fn exterior(ray: Ray) -> Self {
        Self {
            ray,
            in_mask: false,
            observed_depth: None,
        }
    }
}

/// Sphere-tracing and rendering-loss constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderParams {
    pub max_steps: usize,
    pub hit_threshold: f64,
    pub max_distance: f64,
    /// Penetration margin for rays outside the mask (meters).
    pub exterior_margin: f64,
}

impl Default for RenderParams {
    fn default() -> Self {
        Self {
            max_steps: 128,
            hit_threshold: 1e-4,
            max_distance: 20.0,
            exterior_margin: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceResult {
    pub hit_depth: Option<f64>,
    /// Smallest sdf value found along the ray (negative when it penetrates).
    pub min_sdf: f64,
}

fn golden_section_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, iters: usize) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..iters {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1 < f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Sphere-traces an object-frame ray against the shape.
///
/// Steps by the sdf value until it drops below the hit threshold or the ray
/// leaves `max_distance`. Hits are refined to the root by Newton iterations
/// and the minimum sdf is refined by golden-section search around the best
/// sample, so both outputs vary smoothly with the shape parameters.
pub fn sphere_trace(code: &ShapeCode, ray: &Ray, params: &RenderParams) -> TraceResult {
    let dir = ray.direction.into_inner();
    let f = |t: f64| sdf_eval(code, &(ray.origin + dir * t));
    let mut samples: Vec<(f64, f64)> = Vec::with_capacity(32);
    let mut t = 0.0;
    let mut hit = None;
    for _ in 0..params.max_steps {
        let d = f(t);
        samples.push((t, d));
        if d < params.hit_threshold {
            hit = Some(t);
            break;
        }
        t += d;
        if t > params.max_distance {
            samples.push((params.max_distance, f(params.max_distance)));
            break;
        }
    }

    match hit {
        Some(t0) => {
            let mut t = t0;
            if f(0.0) > 0.0 {
                for _ in 0..8 {
                    let h = 1e-7 * t.max(1.0);
                    let g = f(t);
                    let dg = (f(t + h) - f(t - h)) / (2.0 * h);
                    if dg.abs() < 1e-12 {
                        break;
                    }
                    let next = (t - g / dg).max(0.0);
                    if (next - t).abs() < 1e-14 * t.max(1.0) {
                        t = next;
                        break;
                    }
                    t = next;
                }
            } else {
                t = 0.0;
            }
            // march through the interior for the deepest point
            let step = code.max_axis() / 16.0;
            let mut best = (t, f(t));
            let mut s = t;
            for _ in 0..64 {
                s += step;
                let d = f(s);
                if d < best.1 {
                    best = (s, d);
                }
                if d > 0.0 {
                    break;
                }
            }
            let (_, min) = golden_section_min(f, (best.0 - step).max(0.0), best.0 + step, 40);
            TraceResult {
                hit_depth: Some(t),
                min_sdf: min.min(best.1),
            }
        }
        None => {
            let (idx, _) = samples
                .iter()
                .enumerate()
                .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
                .expect("at least one sample");
            let lo = if idx > 0 { samples[idx - 1].0 } else { samples[idx].0 };
            let hi = if idx + 1 < samples.len() {
                samples[idx + 1].0
            } else {
                samples[idx].0 + samples[idx].1.max(1e-6)
            };
            let (_, min) = golden_section_min(f, lo, hi, 40);
            TraceResult {
                hit_depth: None,
                min_sdf: min.min(samples[idx].1),
            }
        }
    }
}

fn render_residual(obs: &RenderObservation, pose_inv: &RigidTransform, code: &ShapeCode, params: &RenderParams) -> f64 {
    let ray = obs.ray.transformed(pose_inv);
    let trace = sphere_trace(code, &ray, params);
    match (obs.in_mask, obs.observed_depth) {
        (true, Some(depth)) => match trace.hit_depth {
            Some(hit) => hit - depth,
            None => depth,
        },
        (true, None) => 0.0,
        (false, _) => (params.exterior_margin - trace.min_sdf).max(0.0),
    }
}

/// Mean squared sdf of world points mapped into the object frame.
pub fn surface_energy(points: &[Point3], pose: &RigidTransform, code: &ShapeCode) -> Result<f64, ReconstructionError> {
    if points.is_empty() {
        return Err(ReconstructionError::EmptyPoints);
    }
    let inv = pose.inverse();
    let sq: Vec<f64> = points
        .par_iter()
        .map(|p| sdf_eval(code, &inv.transform_point(p)).powi(2))
        .collect();
    Ok(sq.iter().sum::<f64>() / points.len() as f64)
}

pub fn render_energy_with(
    observations: &[RenderObservation],
    pose: &RigidTransform,
    code: &ShapeCode,
    params: &RenderParams,
) -> Result<f64, ReconstructionError> {
    if observations.is_empty() {
        return Err(ReconstructionError::EmptyObservations);
    }
    let inv = pose.inverse();
    let sq: Vec<f64> = observations
        .par_iter()
        .map(|o| render_residual(o, &inv, code, params).powi(2))
        .collect();
    Ok(sq.iter().sum::<f64>() / observations.len() as f64)
}

/// Rendering loss with the default sphere-tracing constants.
pub fn render_energy(observations: &[RenderObservation], pose: &RigidTransform, code: &ShapeCode) -> Result<f64, ReconstructionError> {
    render_energy_with(observations, pose, code, &RenderParams::default())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyBreakdown {
    pub e_surf: f64,
    pub e_rend: f64,
    pub e_reg: f64,
    pub total: f64,
}

/// Weighted energy. An empty observation list contributes no rendering term.
pub fn total_energy_with(
    points: &[Point3],
    observations: &[RenderObservation],
    pose: &RigidTransform,
    code: &ShapeCode,
    weights: &EnergyWeights,
    params: &RenderParams,
) -> Result<EnergyBreakdown, ReconstructionError> {
    weights.validate()?;
    let e_surf = surface_energy(points, pose, code)?;
    let e_rend = if observations.is_empty() {
        0.0
    } else {
        render_energy_with(observations, pose, code, params)?
    };
    let e_reg = code.normalized().norm_squared();
    Ok(EnergyBreakdown {
        e_surf,
        e_rend,
        e_reg,
        total: weights.lambda_s * e_surf + weights.lambda_r * e_rend + weights.lambda_c * e_reg,
    })
}

pub fn total_energy(
    points: &[Point3],
    observations: &[RenderObservation],
    pose: &RigidTransform,
    code: &ShapeCode,
    weights: &EnergyWeights,
) -> Result<EnergyBreakdown, ReconstructionError> {
    total_energy_with(points, observations, pose, code, weights, &RenderParams::default())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizeOptions {
    pub max_iterations: usize,
    pub relative_tolerance: f64,
    pub gradient_tolerance: f64,
    pub initial_damping: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
    pub min_points: usize,
    pub render: RenderParams,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            relative_tolerance: 1e-6,
            gradient_tolerance: 1e-8,
            initial_damping: 1e-3,
            damping_increase: 10.0,
            damping_decrease: 0.5,
            min_points: 20,
            render: RenderParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    RelativeDecrease,
    SmallGradient,
    MaxIterations,
    DampingSaturated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub e_surf: f64,
    pub e_rend: f64,
    pub e_reg: f64,
    pub total: f64,
    pub damping: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRecord {
    /// Entry 0 is the initial state; later entries are attempted steps.
    pub iterations: Vec<IterationRecord>,
    pub termination: Termination,
}

impl ConvergenceRecord {
    pub fn accepted_energies(&self) -> Vec<f64> {
        self.iterations
            .iter()
            .filter(|r| r.accepted)
            .map(|r| r.total)
            .collect()
    }

    pub fn final_energy(&self) -> f64 {
        *self.accepted_energies().last().unwrap_or(&f64::NAN)
    }

    /// Number of accepted update steps.
    pub fn accepted_steps(&self) -> usize {
        self.iterations.iter().skip(1).filter(|r| r.accepted).count()
    }
}

struct Problem<'a> {
    points: &'a [Point3],
    observations: &'a [RenderObservation],
    weights: EnergyWeights,
    render: RenderParams,
}

impl Problem<'_> {
    fn residuals(&self, pose: &RigidTransform, code: &ShapeCode) -> DVector<f64> {
        let inv = pose.inverse();
        let n = self.points.len();
        let m = self.observations.len();
        let ws = (self.weights.lambda_s / n as f64).sqrt();
        let surf: Vec<f64> = self
            .points
            .par_iter()
            .map(|p| ws * sdf_eval(code, &inv.transform_point(p)))
            .collect();
        let rend: Vec<f64> = if m > 0 && self.weights.lambda_r > 0.0 {
            let wr = (self.weights.lambda_r / m as f64).sqrt();
            self.observations
                .par_iter()
                .map(|o| wr * render_residual(o, &inv, code, &self.render))
                .collect()
        } else {
            Vec::new()
        };
        let wc = self.weights.lambda_c.sqrt();
        let reg = code.normalized() * wc;
        DVector::from_iterator(
            surf.len() + rend.len() + CODE_DIM,
            surf.into_iter().chain(rend).chain(reg.iter().copied()),
        )
    }

    fn breakdown(&self, pose: &RigidTransform, code: &ShapeCode) -> EnergyBreakdown {
        let e_surf = surface_energy(self.points, pose, code).unwrap_or(f64::NAN);
        let e_rend = if self.observations.is_empty() {
            0.0
        } else {
            render_energy_with(self.observations, pose, code, &self.render).unwrap_or(f64::NAN)
        };
        let e_reg = code.normalized().norm_squared();
        EnergyBreakdown {
            e_surf,
            e_rend,
            e_reg,
            total: self.weights.lambda_s * e_surf + self.weights.lambda_r * e_rend + self.weights.lambda_c * e_reg,
        }
    }

    /// Stacked Jacobian: analytic for surface and regularizer rows, central
    /// differences for rendering rows.
    fn jacobian(&self, pose: &RigidTransform, code: &ShapeCode) -> DMatrix<f64> {
        let inv = pose.inverse();
        let n = self.points.len();
        let m = if self.weights.lambda_r > 0.0 { self.observations.len() } else { 0 };
        let ws = (self.weights.lambda_s / n as f64).sqrt();
        let rows: Vec<[f64; PARAM_DIM]> = self
            .points
            .par_iter()
            .map(|p| {
                let q = inv.transform_point(p);
                let (gp, gz) = sdf_gradient(code, &q);
                // q' = Exp(δ)^-1 q: dq/dω = [q]x, dq/dv = -I
                let d_omega = gp.transpose() * skew(&q.coords);
                let mut row = [0.0; PARAM_DIM];
                for k in 0..3 {
                    row[k] = ws * d_omega[k];
                    row[3 + k] = -ws * gp[k];
                }
                for k in 0..CODE_DIM {
                    row[POSE_DIM + k] = ws * gz[k];
                }
                row
            })
            .collect();

        let mut jac = DMatrix::zeros(n + m + CODE_DIM, PARAM_DIM);
        for (i, row) in rows.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                jac[(i, k)] = *v;
            }
        }

        if m > 0 {
            let wr = (self.weights.lambda_r / m as f64).sqrt();
            let cols: Vec<Vec<f64>> = (0..PARAM_DIM)
                .into_par_iter()
                .map(|k| {
                    let (h, plus, minus) = perturbed(pose, code, k);
                    let (ip, im) = (plus.0.inverse(), minus.0.inverse());
                    self.observations
                        .iter()
                        .map(|o| {
                            let rp = render_residual(o, &ip, &plus.1, &self.render);
                            let rm = render_residual(o, &im, &minus.1, &self.render);
                            wr * (rp - rm) / (2.0 * h)
                        })
                        .collect()
                })
                .collect();
            for (k, col) in cols.iter().enumerate() {
                for (j, v) in col.iter().enumerate() {
                    jac[(n + j, k)] = *v;
                }
            }
        }

        let slope = ShapeCode::normalization_slope();
        let wc = self.weights.lambda_c.sqrt();
        for k in 0..CODE_DIM {
            jac[(n + m + k, POSE_DIM + k)] = wc * slope[k];
        }
        jac
    }
}

type State = (RigidTransform, ShapeCode);

/// Central-difference perturbation of parameter `k` (unclamped code).
fn perturbed(pose: &RigidTransform, code: &ShapeCode, k: usize) -> (f64, State, State) {
    if k < POSE_DIM {
        let h = 1e-6;
        let mut d = Vector6::zeros();
        d[k] = h;
        (h, (pose.retract(&d), *code), (pose.retract(&-d), *code))
    } else {
        let i = k - POSE_DIM;
        let z = code.as_array();
        let h = 1e-6 * z[i].abs().max(1.0);
        let mut zp = z;
        let mut zm = z;
        zp[i] += h;
        zm[i] -= h;
        // the sdf formula stays valid a hair outside the bounds
        (h, (*pose, unchecked_code(zp)), (*pose, unchecked_code(zm)))
    }
}

fn unchecked_code(z: [f64; CODE_DIM]) -> ShapeCode {
    ShapeCode::from_array(z).unwrap_or_else(|_| ShapeCode::clamped(z))
}

fn apply_step(pose: &RigidTransform, code: &ShapeCode, step: &DVector<f64>) -> State {
    let delta = Vector6::from_fn(|i, _| step[i]);
    let z = code.as_array();
    let new_code = ShapeCode::clamped(std::array::from_fn(|i| z[i] + step[POSE_DIM + i]));
    (pose.retract(&delta), new_code)
}

/// Iteratively minimizes the reconstruction energy over the object pose and
/// shape code.
///
/// Terminates on relative energy decrease below `relative_tolerance`,
/// gradient norm below `gradient_tolerance`, or `max_iterations`. Rejected
/// steps raise the damping and leave the state untouched, so the energy of
/// accepted states never increases.
pub fn optimize_object(
    hypothesis: &ObjectHypothesis,
    points: &[Point3],
    observations: &[RenderObservation],
    weights: &EnergyWeights,
    options: &OptimizeOptions,
) -> Result<(ObjectHypothesis, ConvergenceRecord), ReconstructionError> {
    weights.validate()?;
    if hypothesis.status != HypothesisStatus::Reconstructing {
        return Err(ReconstructionError::InvalidStatus(hypothesis.status));
    }
    if points.len() < options.min_points {
        return Err(ReconstructionError::InsufficientObservations {
            got: points.len(),
            need: options.min_points,
        });
    }
    let problem = Problem {
        points,
        observations,
        weights: *weights,
        render: options.render,
    };

    let mut pose = hypothesis.pose;
    let mut code = hypothesis.code;
    let diverged = |iteration: usize, pose: RigidTransform, code: ShapeCode| {
        let mut last = hypothesis.clone();
        last.pose = pose;
        last.code = code;
        last.status = HypothesisStatus::Failed;
        ReconstructionError::Diverged {
            iteration,
            last_valid: Box::new(last),
        }
    };

    let mut residuals = problem.residuals(&pose, &code);
    let mut energy = residuals.norm_squared();
    if !energy.is_finite() {
        return Err(diverged(0, pose, code));
    }
    let b0 = problem.breakdown(&pose, &code);
    let mut record = ConvergenceRecord {
        iterations: vec![IterationRecord {
            iteration: 0,
            e_surf: b0.e_surf,
            e_rend: b0.e_rend,
            e_reg: b0.e_reg,
            total: energy,
            damping: options.initial_damping,
            accepted: true,
        }],
        termination: Termination::MaxIterations,
    };

    let mut damping = options.initial_damping;
    let mut jac = problem.jacobian(&pose, &code);
    for iteration in 1..=options.max_iterations {
        let gradient = jac.transpose() * &residuals;
        if gradient.norm() < options.gradient_tolerance {
            record.termination = Termination::SmallGradient;
            break;
        }
        let mut normal = jac.transpose() * &jac;
        for i in 0..PARAM_DIM {
            normal[(i, i)] += damping;
        }
        let step = match normal.cholesky() {
            Some(ch) => ch.solve(&(-&gradient)),
            None => {
                damping *= options.damping_increase;
                continue;
            }
        };
        let (new_pose, new_code) = apply_step(&pose, &code, &step);
        let new_residuals = problem.residuals(&new_pose, &new_code);
        let new_energy = new_residuals.norm_squared();
        if !new_energy.is_finite() {
            return Err(diverged(iteration, pose, code));
        }
        let accepted = new_energy <= energy;
        let b = if accepted {
            problem.breakdown(&new_pose, &new_code)
        } else {
            EnergyBreakdown {
                e_surf: f64::NAN,
                e_rend: f64::NAN,
                e_reg: f64::NAN,
                total: new_energy,
            }
        };
        record.iterations.push(IterationRecord {
            iteration,
            e_surf: b.e_surf,
            e_rend: b.e_rend,
            e_reg: b.e_reg,
            total: new_energy,
            damping,
            accepted,
        });
        if accepted {
            let decrease = energy - new_energy;
            pose = new_pose;
            code = new_code;
            residuals = new_residuals;
            damping *= options.damping_decrease;
            let rel = decrease / energy.max(f64::MIN_POSITIVE);
            energy = new_energy;
            if rel < options.relative_tolerance {
                record.termination = Termination::RelativeDecrease;
                break;
            }
            jac = problem.jacobian(&pose, &code);
        } else {
            damping *= options.damping_increase;
            if damping > 1e12 {
                record.termination = Termination::DampingSaturated;
                break;
            }
        }
    }

    let mut out = hypothesis.clone();
    out.pose = pose;
    out.code = code;
    out.status = HypothesisStatus::Converged;
    Ok((out, record))
}

/// Unit viewing ray helper used when building observations.
pub fn ray_between(from: &Point3, to: &Point3) -> Option<(Ray, f64)> {
    let d: Vec3 = to - from;
    let len = d.norm();
    Ray::new(*from, d).ok().map(|r| (r, len))
}
