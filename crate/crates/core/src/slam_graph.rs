//! SLAM backend state: keyframes, map points, object hypotheses and the
//! factors tying them together.
//!
//! Keyframe poses are `T_world_cam`; odometry between consecutive keyframes
//! is `pose_i⁻¹ ∘ pose_j`. Map points live in world coordinates.
//! [`FactorGraph::joint_optimize`] refines keyframe poses, map points and
//! object poses together, so a reconstructed object pulls its supporting
//! points (and through them the cameras) onto its surface.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{skew, CameraIntrinsics, Pixel, Point3, RigidTransform};
use crate::reconstruction::{HypothesisStatus, ObjectHypothesis, Termination};
use crate::sdf::{sdf_eval, sdf_gradient};

/// Default matched-feature count below which tracking is lost.
pub const DEFAULT_TRACKING_THRESHOLD: usize = 30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("keyframe id {id} does not exceed last id {last}")]
    NonIncreasingKeyframe { id: u64, last: u64 },
    #[error("keyframe {keyframe} observes unknown map point {point}")]
    UnknownMapPoint { keyframe: u64, point: u64 },
    #[error("unknown keyframe {0}")]
    UnknownKeyframe(u64),
    #[error("map point {0} already exists")]
    DuplicateMapPoint(u64),
    #[error("map point {0} has no observations")]
    UnobservedMapPoint(u64),
    #[error("unknown object {0}")]
    UnknownObject(u64),
    #[error("object {0} already exists")]
    DuplicateObject(u64),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("graph is empty")]
    Empty,
    #[error("graph is disconnected: {0} odometry components")]
    Disconnected(usize),
    #[error("optimization diverged at iteration {0}")]
    Diverged(usize),
    #[error("invalid trigger policy: min_keyframes must be at least 1")]
    InvalidPolicy,
    #[error("inconsistent graph: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub point_id: u64,
    pub pixel: Pixel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub id: u64,
    /// `T_world_cam`.
    pub pose: RigidTransform,
    pub timestamp: f64,
    pub observations: Vec<Observation>,
    /// Blur extent in pixels.
    pub blur_level: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapPoint {
    pub id: u64,
    pub position: Point3,
    pub observation_count: usize,
    pub object_id: Option<u64>,
}

/// Relative-pose constraint between consecutive keyframes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdometryFactor {
    pub from: u64,
    pub to: u64,
    /// Measured `T_from_to`.
    pub relative: RigidTransform,
    /// Diagonal information for the `(rotation, translation)` error.
    pub information: [f64; 6],
}

/// Base odometry noise; scaled by `1 + blur_level` of the newer keyframe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OdometryNoise {
    pub rotation_sigma: f64,
    pub translation_sigma: f64,
}

impl Default for OdometryNoise {
    fn default() -> Self {
        Self {
            rotation_sigma: 2e-3,
            translation_sigma: 1e-2,
        }
    }
}

impl OdometryNoise {
    pub fn information(&self, blur_level: f64) -> [f64; 6] {
        let k = 1.0 + blur_level.max(0.0);
        let ir = 1.0 / (self.rotation_sigma * k).powi(2);
        let it = 1.0 / (self.translation_sigma * k).powi(2);
        [ir, ir, ir, it, it, it]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectEntry {
    pub hypothesis: ObjectHypothesis,
    /// Keyframe count when the object was first seen; the latest keyframe
    /// at that time counts as observing it.
    first_seen: usize,
    /// Whether the object contributes surface factors to joint optimization.
    pub factor_enabled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TriggerPolicy {
    pub min_keyframes: usize,
    pub min_associated_points: usize,
}

impl Default for TriggerPolicy {
    fn default() -> Self {
        Self {
            min_keyframes: 50,
            min_associated_points: 20,
        }
    }
}

impl TriggerPolicy {
    pub fn validate(&self) -> Result<(), GraphError> {
        if self.min_keyframes < 1 {
            return Err(GraphError::InvalidPolicy);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackingStatus {
    Tracked,
    Lost,
}

/// Lost iff fewer than `threshold` features were matched.
pub fn simulate_tracking(matched_features: usize, threshold: usize) -> TrackingStatus {
    if matched_features < threshold {
        TrackingStatus::Lost
    } else {
        TrackingStatus::Tracked
    }
}

/// Frame-by-frame tracking state with recorded loss intervals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrackingMonitor {
    pub threshold: usize,
    /// Closed `[first, last]` frame-index ranges of lost tracking.
    pub lost_intervals: Vec<(usize, usize)>,
    current_loss: Option<usize>,
    last_frame: Option<usize>,
}

impl TrackingMonitor {
    pub fn new(threshold: usize) -> Self {
        Self {
            threshold,
            lost_intervals: Vec::new(),
            current_loss: None,
            last_frame: None,
        }
    }

    pub fn update(&mut self, frame: usize, matched_features: usize) -> TrackingStatus {
        let status = simulate_tracking(matched_features, self.threshold);
        match (status, self.current_loss) {
            (TrackingStatus::Lost, None) => self.current_loss = Some(frame),
            (TrackingStatus::Tracked, Some(start)) => {
                self.lost_intervals.push((start, self.last_frame.unwrap_or(start)));
                self.current_loss = None;
            }
            _ => {}
        }
        self.last_frame = Some(frame);
        status
    }

    /// Closes an interval still open at the end of the sequence.
    pub fn finish(&mut self) {
        if let Some(start) = self.current_loss.take() {
            self.lost_intervals.push((start, self.last_frame.unwrap_or(start)));
        }
    }

    pub fn is_lost(&self) -> bool {
        self.current_loss.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointWeights {
    /// Reprojection noise (pixels).
    pub pixel_sigma: f64,
    /// Surface residual noise of object factors (meters).
    pub object_sigma: f64,
    /// Object residuals are truncated at this many sigmas, so associated
    /// points far off the surface stop pulling on the object.
    pub object_gate: f64,
}

impl Default for JointWeights {
    fn default() -> Self {
        Self {
            pixel_sigma: 1.0,
            object_sigma: 0.02,
            object_gate: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointOptions {
    pub max_iterations: usize,
    pub relative_tolerance: f64,
    pub gradient_tolerance: f64,
    pub initial_damping: f64,
    pub use_object_factors: bool,
}

impl Default for JointOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            relative_tolerance: 1e-6,
            gradient_tolerance: 1e-8,
            initial_damping: 1e-3,
            use_object_factors: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after every accepted step, starting with the initial cost.
    pub accepted_costs: Vec<f64>,
    pub iterations: usize,
    pub termination: Termination,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorGraph {
    pub intrinsics: CameraIntrinsics,
    pub odometry_noise: OdometryNoise,
    keyframes: Vec<Keyframe>,
    map_points: BTreeMap<u64, MapPoint>,
    objects: BTreeMap<u64, ObjectEntry>,
    odometry: Vec<OdometryFactor>,
}

impl FactorGraph {
    pub fn new(intrinsics: CameraIntrinsics) -> Self {
        Self {
            intrinsics,
            odometry_noise: OdometryNoise::default(),
            keyframes: Vec::new(),
            map_points: BTreeMap::new(),
            objects: BTreeMap::new(),
            odometry: Vec::new(),
        }
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    pub fn keyframe(&self, id: u64) -> Option<&Keyframe> {
        self.keyframe_index(id).map(|i| &self.keyframes[i])
    }

    /// Replaces a keyframe's pose estimate. Odometry measurements are kept.
    pub fn set_keyframe_pose(&mut self, id: u64, pose: RigidTransform) -> Result<(), GraphError> {
        if !pose.is_finite() {
            return Err(GraphError::NonFinite("keyframe pose"));
        }
        let i = self.keyframe_index(id).ok_or(GraphError::UnknownKeyframe(id))?;
        self.keyframes[i].pose = pose;
        Ok(())
    }

    fn keyframe_index(&self, id: u64) -> Option<usize> {
        self.keyframes.binary_search_by_key(&id, |k| k.id).ok()
    }

    pub fn latest_keyframe(&self) -> Option<&Keyframe> {
        self.keyframes.last()
    }

    pub fn map_points(&self) -> &BTreeMap<u64, MapPoint> {
        &self.map_points
    }

    pub fn map_point(&self, id: u64) -> Option<&MapPoint> {
        self.map_points.get(&id)
    }

    pub fn odometry_factors(&self) -> &[OdometryFactor] {
        &self.odometry
    }

    pub fn observation_factor_count(&self) -> usize {
        self.keyframes.iter().map(|k| k.observations.len()).sum()
    }

    pub fn objects(&self) -> &BTreeMap<u64, ObjectEntry> {
        &self.objects
    }

    pub fn object(&self, id: u64) -> Option<&ObjectHypothesis> {
        self.objects.get(&id).map(|e| &e.hypothesis)
    }

    /// Inserts a keyframe with an odometry factor to the previous one.
    /// Every observation must reference an existing map point.
    pub fn add_keyframe(&mut self, keyframe: Keyframe) -> Result<(), GraphError> {
        if let Some(last) = self.keyframes.last() {
            if keyframe.id <= last.id {
                return Err(GraphError::NonIncreasingKeyframe {
                    id: keyframe.id,
                    last: last.id,
                });
            }
        }
        if !keyframe.pose.is_finite() || !keyframe.timestamp.is_finite() {
            return Err(GraphError::NonFinite("keyframe pose"));
        }
        let mut seen = BTreeSet::new();
        for o in &keyframe.observations {
            if !self.map_points.contains_key(&o.point_id) {
                return Err(GraphError::UnknownMapPoint {
                    keyframe: keyframe.id,
                    point: o.point_id,
                });
            }
            if !seen.insert(o.point_id) {
                return Err(GraphError::Inconsistent(format!(
                    "keyframe {} observes point {} twice",
                    keyframe.id, o.point_id
                )));
            }
        }
        for o in &keyframe.observations {
            self.map_points.get_mut(&o.point_id).expect("checked").observation_count += 1;
        }
        if let Some(prev) = self.keyframes.last() {
            self.odometry.push(OdometryFactor {
                from: prev.id,
                to: keyframe.id,
                relative: prev.pose.inverse().compose(&keyframe.pose),
                information: self.odometry_noise.information(keyframe.blur_level),
            });
        }
        self.keyframes.push(keyframe);
        Ok(())
    }

    /// Inserts a triangulated map point together with its observations in
    /// existing keyframes.
    pub fn add_map_point(
        &mut self,
        id: u64,
        position: Point3,
        observations: &[(u64, Pixel)],
    ) -> Result<(), GraphError> {
        if self.map_points.contains_key(&id) {
            return Err(GraphError::DuplicateMapPoint(id));
        }
        if !position.coords.iter().all(|v| v.is_finite()) {
            return Err(GraphError::NonFinite("map point position"));
        }
        if observations.is_empty() {
            return Err(GraphError::UnobservedMapPoint(id));
        }
        let mut idx = Vec::with_capacity(observations.len());
        for (kf, _) in observations {
            let i = self.keyframe_index(*kf).ok_or(GraphError::UnknownKeyframe(*kf))?;
            if idx.contains(&i) {
                return Err(GraphError::Inconsistent(format!("point {id} observed twice by keyframe {kf}")));
            }
            idx.push(i);
        }
        for (i, (_, px)) in idx.iter().zip(observations) {
            self.keyframes[*i].observations.push(Observation { point_id: id, pixel: *px });
        }
        self.map_points.insert(
            id,
            MapPoint {
                id,
                position,
                observation_count: observations.len(),
                object_id: None,
            },
        );
        Ok(())
    }

    /// Adds an observation of an existing point to an existing keyframe.
    pub fn add_observation(&mut self, keyframe: u64, point: u64, pixel: Pixel) -> Result<(), GraphError> {
        let i = self.keyframe_index(keyframe).ok_or(GraphError::UnknownKeyframe(keyframe))?;
        let mp = self
            .map_points
            .get_mut(&point)
            .ok_or(GraphError::UnknownMapPoint { keyframe, point })?;
        if self.keyframes[i].observations.iter().any(|o| o.point_id == point) {
            return Err(GraphError::Inconsistent(format!("point {point} observed twice by keyframe {keyframe}")));
        }
        mp.observation_count += 1;
        self.keyframes[i].observations.push(Observation { point_id: point, pixel });
        Ok(())
    }

    /// Registers an object first seen in the latest keyframe.
    pub fn add_object(&mut self, hypothesis: ObjectHypothesis) -> Result<(), GraphError> {
        if self.objects.contains_key(&hypothesis.id) {
            return Err(GraphError::DuplicateObject(hypothesis.id));
        }
        for pid in &hypothesis.associated_point_ids {
            if !self.map_points.contains_key(pid) {
                return Err(GraphError::Inconsistent(format!("object references unknown point {pid}")));
            }
        }
        let first_seen = self.keyframes.len().saturating_sub(1);
        for pid in &hypothesis.associated_point_ids {
            self.map_points.get_mut(pid).expect("checked").object_id = Some(hypothesis.id);
        }
        self.objects.insert(
            hypothesis.id,
            ObjectEntry {
                hypothesis,
                first_seen,
                factor_enabled: false,
            },
        );
        Ok(())
    }

    /// Replaces pose, code and status of an object after reconstruction.
    /// Associations are owned by the graph and left untouched.
    pub fn update_object(&mut self, hypothesis: &ObjectHypothesis) -> Result<(), GraphError> {
        let e = self
            .objects
            .get_mut(&hypothesis.id)
            .ok_or(GraphError::UnknownObject(hypothesis.id))?;
        e.hypothesis.pose = hypothesis.pose;
        e.hypothesis.code = hypothesis.code;
        e.hypothesis.status = hypothesis.status;
        Ok(())
    }

    pub fn set_object_factor(&mut self, object_id: u64, enabled: bool) -> Result<(), GraphError> {
        self.objects
            .get_mut(&object_id)
            .ok_or(GraphError::UnknownObject(object_id))?
            .factor_enabled = enabled;
        Ok(())
    }

    /// Keyframes inserted since the object was first seen, inclusive.
    pub fn keyframes_since_seen(&self, object_id: u64) -> Result<usize, GraphError> {
        let e = self.objects.get(&object_id).ok_or(GraphError::UnknownObject(object_id))?;
        Ok(self.keyframes.len().saturating_sub(e.first_seen))
    }

    /// Tags map points observed in the latest keyframe whose projection
    /// satisfies `mask`. Returns the number of newly associated points.
    pub fn associate_points(
        &mut self,
        object_id: u64,
        mask: impl Fn(&Pixel) -> bool,
    ) -> Result<usize, GraphError> {
        if !self.objects.contains_key(&object_id) {
            return Err(GraphError::UnknownObject(object_id));
        }
        let Some(kf) = self.keyframes.last() else {
            return Ok(0);
        };
        let cam_world = kf.pose.inverse();
        let mut newly = Vec::new();
        for o in &kf.observations {
            let mp = &self.map_points[&o.point_id];
            if mp.object_id.is_some() {
                continue;
            }
            let Ok(px) = self.intrinsics.project(&cam_world.transform_point(&mp.position)) else {
                continue;
            };
            if mask(&px) {
                newly.push(o.point_id);
            }
        }
        let entry = self.objects.get_mut(&object_id).expect("checked");
        for pid in &newly {
            self.map_points.get_mut(pid).expect("observed point exists").object_id = Some(object_id);
            entry.hypothesis.associated_point_ids.insert(*pid);
        }
        Ok(newly.len())
    }

    pub fn should_reconstruct(&self, policy: &TriggerPolicy, object_id: u64) -> Result<bool, GraphError> {
        policy.validate()?;
        let since = self.keyframes_since_seen(object_id)?;
        let points = self.objects[&object_id].hypothesis.associated_point_ids.len();
        Ok(since >= policy.min_keyframes && points >= policy.min_associated_points)
    }

    /// Exhaustive reference check over all nodes and factors.
    pub fn check_consistency(&self) -> Result<(), GraphError> {
        let bad = |m: String| Err(GraphError::Inconsistent(m));
        for w in self.keyframes.windows(2) {
            if w[1].id <= w[0].id {
                return bad(format!("keyframe ids {} then {}", w[0].id, w[1].id));
            }
        }
        let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
        for kf in &self.keyframes {
            for o in &kf.observations {
                if !self.map_points.contains_key(&o.point_id) {
                    return bad(format!("keyframe {} -> missing point {}", kf.id, o.point_id));
                }
                *counts.entry(o.point_id).or_default() += 1;
            }
        }
        for (id, mp) in &self.map_points {
            if mp.observation_count < 1 || counts.get(id).copied().unwrap_or(0) != mp.observation_count {
                return bad(format!("point {id} observation count {}", mp.observation_count));
            }
            if let Some(o) = mp.object_id {
                match self.objects.get(&o) {
                    Some(e) if e.hypothesis.associated_point_ids.contains(id) => {}
                    _ => return bad(format!("point {id} -> object {o} not mirrored")),
                }
            }
        }
        for (oid, e) in &self.objects {
            for pid in &e.hypothesis.associated_point_ids {
                if self.map_points.get(pid).and_then(|m| m.object_id) != Some(*oid) {
                    return bad(format!("object {oid} -> point {pid} not mirrored"));
                }
            }
        }
        if self.odometry.len() != self.keyframes.len().saturating_sub(1) {
            return bad(format!("{} odometry factors for {} keyframes", self.odometry.len(), self.keyframes.len()));
        }
        for f in &self.odometry {
            if self.keyframe_index(f.from).is_none() || self.keyframe_index(f.to).is_none() {
                return bad(format!("odometry {} -> {} dangling", f.from, f.to));
            }
        }
        Ok(())
    }

    /// Number of connected components of keyframes under odometry factors.
    pub fn odometry_components(&self) -> usize {
        let n = self.keyframes.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        for f in &self.odometry {
            if let (Some(a), Some(b)) = (self.keyframe_index(f.from), self.keyframe_index(f.to)) {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
        (0..n).filter(|&i| find(&mut parent, i) == i).count()
    }

    /// Removes the odometry factor ending at `to`; exposed for tests of the
    /// connectivity check.
    #[doc(hidden)]
    pub fn drop_odometry_into(&mut self, to: u64) {
        self.odometry.retain(|f| f.to != to);
    }

    /// Sum of squared whitened residuals.
    pub fn cost(&self, weights: &JointWeights, use_object_factors: bool) -> f64 {
        let layout = Layout::new(self, use_object_factors);
        let blocks = self.linearize(&layout, weights, false);
        blocks.iter().map(|b| b.r.norm_squared()).sum()
    }

    /// Damped Gauss-Newton over keyframe poses (first held fixed), map
    /// points and object poses with factors enabled.
    pub fn joint_optimize(&mut self, weights: &JointWeights, options: &JointOptions) -> Result<JointReport, GraphError> {
        if self.keyframes.is_empty() {
            return Err(GraphError::Empty);
        }
        let comps = self.odometry_components();
        if comps != 1 {
            return Err(GraphError::Disconnected(comps));
        }
        let layout = Layout::new(self, options.use_object_factors);
        let mut blocks = self.linearize(&layout, weights, true);
        let mut cost: f64 = blocks.iter().map(|b| b.r.norm_squared()).sum();
        if !cost.is_finite() {
            return Err(GraphError::Diverged(0));
        }
        let initial_cost = cost;
        let mut accepted_costs = vec![cost];
        let mut damping = options.initial_damping;
        let mut termination = Termination::MaxIterations;
        let mut iterations = 0;
        while iterations < options.max_iterations {
            iterations += 1;
            let normal = NormalEquations::build(&layout, &blocks);
            if normal.gradient_norm() < options.gradient_tolerance {
                termination = Termination::SmallGradient;
                break;
            }
            let mut accepted = false;
            while damping < 1e16 {
                let Some((dc, dp)) = normal.solve(damping) else {
                    damping *= 10.0;
                    continue;
                };
                let mut cand = self.clone();
                cand.apply_step(&layout, &dc, &dp);
                let cand_blocks = cand.linearize(&layout, weights, true);
                let c: f64 = cand_blocks.iter().map(|b| b.r.norm_squared()).sum();
                if !c.is_finite() {
                    if damping > 1e12 {
                        return Err(GraphError::Diverged(iterations));
                    }
                    damping *= 10.0;
                    continue;
                }
                if c <= cost {
                    let rel = if cost > 0.0 { (cost - c) / cost } else { 0.0 };
                    *self = cand;
                    blocks = cand_blocks;
                    cost = c;
                    accepted_costs.push(c);
                    damping = (damping * 0.5).max(1e-12);
                    accepted = true;
                    if rel < options.relative_tolerance {
                        termination = Termination::RelativeDecrease;
                    }
                    break;
                }
                damping *= 10.0;
            }
            if !accepted {
                termination = Termination::DampingSaturated;
                break;
            }
            if termination == Termination::RelativeDecrease {
                break;
            }
        }
        Ok(JointReport {
            initial_cost,
            final_cost: cost,
            accepted_costs,
            iterations,
            termination,
        })
    }

    fn apply_step(&mut self, layout: &Layout, dc: &DVector<f64>, dp: &DVector<f64>) {
        for (v, var) in layout.pose_vars.iter().enumerate() {
            let d = Vector6::from_iterator(dc.rows(6 * v, 6).iter().copied());
            match var {
                PoseVar::Keyframe(i) => self.keyframes[*i].pose = self.keyframes[*i].pose.retract(&d),
                PoseVar::Object(id) => {
                    let h = &mut self.objects.get_mut(id).expect("layout object").hypothesis;
                    h.pose = h.pose.retract(&d);
                }
            }
        }
        for (v, pid) in layout.point_vars.iter().enumerate() {
            let d = Vector3::new(dp[3 * v], dp[3 * v + 1], dp[3 * v + 2]);
            self.map_points.get_mut(pid).expect("layout point").position += d;
        }
    }

    fn linearize(&self, layout: &Layout, weights: &JointWeights, jacobians: bool) -> Vec<Block> {
        let mut out: Vec<Block> = self
            .odometry
            .par_iter()
            .map(|f| self.odometry_block(layout, f, jacobians))
            .collect();
        let obs: Vec<(usize, usize)> = self
            .keyframes
            .iter()
            .enumerate()
            .flat_map(|(i, k)| (0..k.observations.len()).map(move |j| (i, j)))
            .collect();
        out.extend(
            obs.par_iter()
                .filter_map(|&(i, j)| self.reprojection_block(layout, i, j, weights.pixel_sigma, jacobians))
                .collect::<Vec<_>>(),
        );
        let obj: Vec<(u64, u64)> = layout
            .pose_vars
            .iter()
            .filter_map(|v| match v {
                PoseVar::Object(id) => Some(*id),
                _ => None,
            })
            .flat_map(|id| {
                self.objects[&id]
                    .hypothesis
                    .associated_point_ids
                    .iter()
                    .map(move |p| (id, *p))
            })
            .collect();
        out.extend(
            obj.par_iter()
                .map(|&(o, p)| self.object_block(layout, o, p, weights, jacobians))
                .collect::<Vec<_>>(),
        );
        out
    }

    fn odometry_block(&self, layout: &Layout, f: &OdometryFactor, jac: bool) -> Block {
        let ia = self.keyframe_index(f.from).expect("connected");
        let ib = self.keyframe_index(f.to).expect("connected");
        let sqrt_info = Vector6::from_iterator(f.information.iter().map(|v| v.sqrt()));
        let z_inv = f.relative.inverse();
        let err = |ta: &RigidTransform, tb: &RigidTransform| -> Vector6<f64> {
            z_inv.compose(&ta.inverse().compose(tb)).to_increment().component_mul(&sqrt_info)
        };
        let (ta, tb) = (self.keyframes[ia].pose, self.keyframes[ib].pose);
        let r = err(&ta, &tb);
        let mut poses = Vec::new();
        if jac {
            let h = 1e-6;
            for (idx, which) in [(ia, 0), (ib, 1)] {
                let Some(var) = layout.keyframe_var[idx] else { continue };
                let mut j = SMatrix::<f64, 6, 6>::zeros();
                for k in 0..6 {
                    let mut d = Vector6::zeros();
                    d[k] = h;
                    let (p, m) = if which == 0 {
                        (err(&ta.retract(&d), &tb), err(&ta.retract(&-d), &tb))
                    } else {
                        (err(&ta, &tb.retract(&d)), err(&ta, &tb.retract(&-d)))
                    };
                    j.set_column(k, &((p - m) / (2.0 * h)));
                }
                poses.push((var, DMatrix::from_column_slice(6, 6, j.as_slice())));
            }
        }
        Block {
            r: DVector::from_column_slice(r.as_slice()),
            poses,
            point: None,
        }
    }

    fn reprojection_block(&self, layout: &Layout, ki: usize, oi: usize, sigma: f64, jac: bool) -> Option<Block> {
        let kf = &self.keyframes[ki];
        let o = &kf.observations[oi];
        let p = self.map_points[&o.point_id].position;
        let rwc = kf.pose.rotation_matrix();
        // same arithmetic path as projecting through `pose.inverse()`
        let pc = kf.pose.inverse().transform_point(&p).coords;
        if pc.z <= 1e-6 {
            return None;
        }
        let k = &self.intrinsics;
        let iz = 1.0 / pc.z;
        let r = DVector::from_vec(vec![
            (k.fx * pc.x * iz + k.cx - o.pixel.x) / sigma,
            (k.fy * pc.y * iz + k.cy - o.pixel.y) / sigma,
        ]);
        let mut poses = Vec::new();
        let mut point = None;
        if jac {
            let dproj = nalgebra::Matrix2x3::new(
                k.fx * iz,
                0.0,
                -k.fx * pc.x * iz * iz,
                0.0,
                k.fy * iz,
                -k.fy * pc.y * iz * iz,
            ) / sigma;
            if let Some(var) = layout.keyframe_var[ki] {
                // T_wc ∘ Exp(δ): p_c -> R_δᵀ (p_c - v)
                let mut dpc = nalgebra::Matrix3x6::zeros();
                dpc.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&pc));
                dpc.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-Matrix3::identity()));
                let j = dproj * dpc;
                poses.push((var, DMatrix::from_column_slice(2, 6, j.as_slice())));
            }
            if let Some(&pv) = layout.point_index.get(&o.point_id) {
                let j = dproj * rwc.transpose();
                point = Some((pv, DMatrix::from_column_slice(2, 3, j.as_slice())));
            }
        }
        Some(Block { r, poses, point })
    }

    fn object_block(&self, layout: &Layout, oid: u64, pid: u64, weights: &JointWeights, jac: bool) -> Block {
        let sigma = weights.object_sigma;
        let h = &self.objects[&oid].hypothesis;
        let p = self.map_points[&pid].position;
        let ro = h.pose.rotation_matrix();
        let q = Point3::from(ro.transpose() * (p.coords - h.pose.translation));
        let raw = sdf_eval(&h.code, &q) / sigma;
        let gated = raw.abs() > weights.object_gate;
        let r = DVector::from_element(1, if gated { weights.object_gate } else { raw });
        let mut poses = Vec::new();
        let mut point = None;
        if gated {
            if jac {
                poses.push((layout.object_var[&oid], DMatrix::zeros(1, 6)));
            }
            return Block { r, poses, point };
        }
        if jac {
            let (g, _) = sdf_gradient(&h.code, &q);
            let g = g / sigma;
            let mut dq = nalgebra::Matrix3x6::zeros();
            dq.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&q.coords));
            dq.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-Matrix3::identity()));
            let jp = g.transpose() * dq;
            poses.push((layout.object_var[&oid], DMatrix::from_column_slice(1, 6, jp.as_slice())));
            if let Some(&pv) = layout.point_index.get(&pid) {
                let j = g.transpose() * ro.transpose();
                point = Some((pv, DMatrix::from_column_slice(1, 3, j.as_slice())));
            }
        }
        Block { r, poses, point }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum PoseVar {
    Keyframe(usize),
    Object(u64),
}

/// Variable ordering for one optimization run.
struct Layout {
    pose_vars: Vec<PoseVar>,
    keyframe_var: Vec<Option<usize>>,
    object_var: BTreeMap<u64, usize>,
    point_vars: Vec<u64>,
    point_index: BTreeMap<u64, usize>,
}

impl Layout {
    fn new(g: &FactorGraph, use_objects: bool) -> Self {
        let mut pose_vars = Vec::new();
        let mut keyframe_var = vec![None; g.keyframes.len()];
        for (i, slot) in keyframe_var.iter_mut().enumerate().skip(1) {
            *slot = Some(pose_vars.len());
            pose_vars.push(PoseVar::Keyframe(i));
        }
        let mut object_var = BTreeMap::new();
        let mut bound: BTreeSet<u64> = BTreeSet::new();
        if use_objects {
            for (id, e) in &g.objects {
                if e.factor_enabled
                    && e.hypothesis.status == HypothesisStatus::Converged
                    && !e.hypothesis.associated_point_ids.is_empty()
                {
                    object_var.insert(*id, pose_vars.len());
                    pose_vars.push(PoseVar::Object(*id));
                    bound.extend(e.hypothesis.associated_point_ids.iter().copied());
                }
            }
        }
        // a point needs two views (or an object factor) to be constrained
        let mut point_vars = Vec::new();
        let mut point_index = BTreeMap::new();
        for (id, mp) in &g.map_points {
            if mp.observation_count >= 2 || bound.contains(id) {
                point_index.insert(*id, point_vars.len());
                point_vars.push(*id);
            }
        }
        Self {
            pose_vars,
            keyframe_var,
            object_var,
            point_vars,
            point_index,
        }
    }
}

/// Whitened residual with Jacobians for the free variables it touches.
struct Block {
    r: DVector<f64>,
    poses: Vec<(usize, DMatrix<f64>)>,
    point: Option<(usize, DMatrix<f64>)>,
}

/// Normal equations split into pose and point parts for Schur elimination.
struct NormalEquations {
    hcc: DMatrix<f64>,
    gc: DVector<f64>,
    hpp: Vec<Matrix3<f64>>,
    gp: DVector<f64>,
    /// Per point: pose-variable couplings `J_poseᵀ J_point`, sorted by pose.
    hcp: Vec<Vec<(usize, SMatrix<f64, 6, 3>)>>,
}

const SCHUR_CHUNKS: usize = 32;

impl NormalEquations {
    fn build(layout: &Layout, blocks: &[Block]) -> Self {
        let nc = 6 * layout.pose_vars.len();
        let np = layout.point_vars.len();
        let mut hcc = DMatrix::zeros(nc, nc);
        let mut gc = DVector::zeros(nc);
        let mut hpp = vec![Matrix3::zeros(); np];
        let mut gp = DVector::zeros(3 * np);
        let mut hcp: Vec<BTreeMap<usize, SMatrix<f64, 6, 3>>> = vec![BTreeMap::new(); np];
        for b in blocks {
            for (va, ja) in &b.poses {
                let g = ja.transpose() * &b.r;
                let mut gv = gc.rows_mut(6 * va, 6);
                gv += &g;
                for (vb, jb) in &b.poses {
                    let h = ja.transpose() * jb;
                    let mut view = hcc.view_mut((6 * va, 6 * vb), (6, 6));
                    view += &h;
                }
            }
            if let Some((pv, jp)) = &b.point {
                let h = jp.transpose() * jp;
                hpp[*pv] += Matrix3::from_iterator(h.iter().copied());
                let g = jp.transpose() * &b.r;
                let mut gv = gp.rows_mut(3 * pv, 3);
                gv += &g;
                for (va, ja) in &b.poses {
                    let w = ja.transpose() * jp;
                    *hcp[*pv].entry(*va).or_insert_with(SMatrix::zeros) += SMatrix::<f64, 6, 3>::from_iterator(w.iter().copied());
                }
            }
        }
        Self {
            hcc,
            gc,
            hpp,
            gp,
            hcp: hcp.into_iter().map(|m| m.into_iter().collect()).collect(),
        }
    }

    fn gradient_norm(&self) -> f64 {
        self.gc.amax().max(self.gp.amax())
    }

    /// Solves the damped system `(H + λ diag(H)) δ = -g` by eliminating the
    /// point blocks.
    fn solve(&self, damping: f64) -> Option<(DVector<f64>, DVector<f64>)> {
        let nc = self.hcc.nrows();
        let np = self.hpp.len();
        let damp = |d: f64| d * (1.0 + damping) + damping * 1e-9;
        let hpp_inv: Vec<Matrix3<f64>> = self
            .hpp
            .iter()
            .map(|h| {
                let mut h = *h;
                for i in 0..3 {
                    h[(i, i)] = damp(h[(i, i)]);
                }
                h.try_inverse()
            })
            .collect::<Option<Vec<_>>>()?;
        // fixed chunking keeps the reduction order independent of thread count
        let chunk = np.div_ceil(SCHUR_CHUNKS).max(1);
        let partial: Vec<(DMatrix<f64>, DVector<f64>)> = (0..np)
            .collect::<Vec<_>>()
            .par_chunks(chunk)
            .map(|ids| {
                let mut s = DMatrix::zeros(nc, nc);
                let mut b = DVector::zeros(nc);
                for &p in ids {
                    let inv = &hpp_inv[p];
                    let gp = Vector3::new(self.gp[3 * p], self.gp[3 * p + 1], self.gp[3 * p + 2]);
                    let links = &self.hcp[p];
                    for (va, wa) in links {
                        let wa_inv = wa * inv;
                        let mut bv = b.rows_mut(6 * va, 6);
                        bv -= wa_inv * gp;
                        for (vb, wb) in links {
                            let mut view = s.view_mut((6 * va, 6 * vb), (6, 6));
                            view -= wa_inv * wb.transpose();
                        }
                    }
                }
                (s, b)
            })
            .collect();
        let mut s = self.hcc.clone();
        for i in 0..nc {
            s[(i, i)] = damp(s[(i, i)]);
        }
        let mut rhs = -self.gc.clone();
        for (ps, pb) in &partial {
            s += ps;
            rhs -= pb;
        }
        let dc = if nc > 0 { s.cholesky()?.solve(&rhs) } else { DVector::zeros(0) };
        let mut dp = DVector::zeros(3 * np);
        for p in 0..np {
            let mut rhs_p = -Vector3::new(self.gp[3 * p], self.gp[3 * p + 1], self.gp[3 * p + 2]);
            for (va, wa) in &self.hcp[p] {
                let d = Vector6::from_iterator(dc.rows(6 * va, 6).iter().copied());
                rhs_p -= wa.transpose() * d;
            }
            dp.rows_mut(3 * p, 3).copy_from(&(hpp_inv[p] * rhs_p));
        }
        if dc.iter().chain(dp.iter()).all(|v| v.is_finite()) {
            Some((dc, dp))
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{look_at, Vec3};
    use crate::sdf::{extract_mesh_points, ShapeCode};
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn kf(id: u64, pose: RigidTransform) -> Keyframe {
        Keyframe {
            id,
            pose,
            timestamp: id as f64,
            observations: Vec::new(),
            blur_level: 0.0,
        }
    }

    fn circle_pose(i: usize, n: usize, radius: f64, target: &Point3) -> RigidTransform {
        let a = 0.6 * std::f64::consts::PI * i as f64 / n as f64;
        let eye = Point3::new(radius * a.cos(), radius * a.sin(), 1.5);
        look_at(&eye, target, &Vec3::z())
    }

    /// Keyframes on an arc around the origin observing every visible point
    /// with exact pixels.
    fn scene(n_kf: usize, points: &[Point3], pixel_noise: f64, seed: u64) -> FactorGraph {
        scene_with(n_kf, points, pixel_noise, seed, OdometryNoise::default())
    }

    fn scene_with(n_kf: usize, points: &[Point3], pixel_noise: f64, seed: u64, odo: OdometryNoise) -> FactorGraph {
        let k = intrinsics();
        let mut g = FactorGraph::new(k);
        g.odometry_noise = odo;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, pixel_noise.max(1e-300)).unwrap();
        let target = Point3::new(0.0, 0.0, 0.3);
        for i in 0..n_kf {
            g.add_keyframe(kf(i as u64, circle_pose(i, n_kf, 4.0, &target))).unwrap();
        }
        for (pid, p) in points.iter().enumerate() {
            let mut obs = Vec::new();
            for kfr in g.keyframes() {
                if let Ok(px) = k.project(&kfr.pose.inverse().transform_point(p)) {
                    if k.in_image(&px) {
                        let px = if pixel_noise > 0.0 {
                            Pixel::new(px.x + noise.sample(&mut rng), px.y + noise.sample(&mut rng))
                        } else {
                            px
                        };
                        obs.push((kfr.id, px));
                    }
                }
            }
            if !obs.is_empty() {
                g.add_map_point(pid as u64, *p, &obs).unwrap();
            }
        }
        g
    }

    fn random_points(rng: &mut impl Rng, n: usize) -> Vec<Point3> {
        (0..n)
            .map(|_| Point3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(0.0..1.5)))
            .collect()
    }

    #[test]
    fn keyframe_insertion_and_odometry() {
        let mut g = FactorGraph::new(intrinsics());
        let p1 = RigidTransform::new(UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3), Vec3::new(1.0, 0.0, 0.0));
        g.add_keyframe(kf(1, p1)).unwrap();
        assert_eq!((g.keyframes().len(), g.odometry_factors().len()), (1, 0));
        let p2 = RigidTransform::new(UnitQuaternion::from_euler_angles(0.0, 0.4, 0.3), Vec3::new(1.0, 2.0, 0.0));
        g.add_keyframe(kf(2, p2)).unwrap();
        assert_eq!(g.odometry_factors().len(), 1);
        let expect = p1.inverse().compose(&p2);
        let f = g.odometry_factors()[0];
        assert_eq!((f.from, f.to), (1, 2));
        assert!(f.relative.rotation_angle_to(&expect) < 1e-15 && (f.relative.translation - expect.translation).norm() < 1e-15);
        assert!(matches!(g.add_keyframe(kf(2, p2)), Err(GraphError::NonIncreasingKeyframe { .. })));
        assert!(matches!(g.add_keyframe(kf(1, p2)), Err(GraphError::NonIncreasingKeyframe { .. })));
        let mut bad = kf(3, p2);
        bad.observations.push(Observation { point_id: 9, pixel: Pixel::new(0.0, 0.0) });
        assert!(matches!(g.add_keyframe(bad), Err(GraphError::UnknownMapPoint { .. })));
        g.check_consistency().unwrap();
    }

    #[test]
    fn fifty_keyframes_fire_the_trigger() {
        let mut g = FactorGraph::new(intrinsics());
        g.add_keyframe(kf(0, RigidTransform::identity())).unwrap();
        for i in 0..100 {
            g.add_map_point(i, Point3::new(i as f64 * 0.01, 0.0, 3.0), &[(0, Pixel::new(1.0, 1.0))]).unwrap();
        }
        let mut obj = ObjectHypothesis::new(7, RigidTransform::identity(), ShapeCode::centered());
        obj.associated_point_ids = (0..100).collect();
        g.add_object(obj).unwrap();
        let policy = TriggerPolicy::default();
        let mut fired_at = None;
        for i in 1..60u64 {
            g.add_keyframe(kf(i, RigidTransform::from_translation(Vec3::new(i as f64 * 0.1, 0.0, 0.0)))).unwrap();
            let n = g.keyframes().len();
            let fire = g.should_reconstruct(&policy, 7).unwrap();
            if n == 15 {
                assert!(!fire);
            }
            if let Some(at) = fired_at {
                assert!(fire, "trigger must stay on after {at}");
            } else if fire {
                fired_at = Some(n);
            }
            if n == 50 {
                assert_eq!(g.odometry_factors().len(), 49);
            }
        }
        assert_eq!(fired_at, Some(50));
        g.check_consistency().unwrap();
    }

    #[test]
    fn trigger_point_gate() {
        let mut g = FactorGraph::new(intrinsics());
        g.add_keyframe(kf(0, RigidTransform::identity())).unwrap();
        for i in 0..5 {
            g.add_map_point(i, Point3::new(0.0, 0.0, 2.0 + i as f64), &[(0, Pixel::new(1.0, 1.0))]).unwrap();
        }
        let mut obj = ObjectHypothesis::new(1, RigidTransform::identity(), ShapeCode::centered());
        obj.associated_point_ids = (0..5).collect();
        g.add_object(obj).unwrap();
        for i in 1..60 {
            g.add_keyframe(kf(i, RigidTransform::identity())).unwrap();
        }
        assert_eq!(g.keyframes_since_seen(1).unwrap(), 60);
        assert!(!g.should_reconstruct(&TriggerPolicy::default(), 1).unwrap());
        assert!(g.should_reconstruct(&TriggerPolicy { min_keyframes: 50, min_associated_points: 5 }, 1).unwrap());
        assert!(g.should_reconstruct(&TriggerPolicy { min_keyframes: 0, min_associated_points: 0 }, 1).is_err());
        assert!(matches!(g.should_reconstruct(&TriggerPolicy::default(), 2), Err(GraphError::UnknownObject(2))));
    }

    #[test]
    fn association_examples_and_idempotence() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = random_points(&mut rng, 200);
        let mut g = scene(5, &pts, 0.0, 1);
        g.add_object(ObjectHypothesis::new(3, RigidTransform::identity(), ShapeCode::centered())).unwrap();
        assert_eq!(g.associate_points(3, |_| false).unwrap(), 0);
        let visible = g.latest_keyframe().unwrap().observations.len();
        assert_eq!(g.associate_points(3, |_| true).unwrap(), visible);
        assert_eq!(g.associate_points(3, |_| true).unwrap(), 0);
        assert_eq!(g.object(3).unwrap().associated_point_ids.len(), visible);
        g.check_consistency().unwrap();
        assert!(matches!(g.associate_points(4, |_| true), Err(GraphError::UnknownObject(4))));
    }

    #[test]
    fn associated_fraction_tracks_scene_construction() {
        let k = intrinsics();
        let code = ShapeCode::new(0.6, 0.4, 0.3, 0.6, 0.8).unwrap();
        let surface = extract_mesh_points(&code, 64).unwrap();
        let obj_pose = RigidTransform::from_translation(Vec3::new(0.0, 0.0, 0.3));
        let cam = look_at(&Point3::new(4.0, 0.0, 1.5), &Point3::new(0.0, 0.0, 0.3), &Vec3::z());
        let cam_world = cam.inverse();
        let obox = crate::sdf::tight_bounding_box(&code, &obj_pose);
        // mask: projected box inflated by 5% about its center
        let corners: Vec<Pixel> = obox.corners().iter().map(|c| k.project(&cam_world.transform_point(c)).unwrap()).collect();
        let (mut lo, mut hi) = (corners[0], corners[0]);
        for c in &corners {
            lo = lo.inf(c);
            hi = hi.sup(c);
        }
        let mid = nalgebra::center(&lo, &hi);
        let half = (hi - lo) * 0.5 * 1.05;
        let in_mask = move |p: &Pixel| (p.x - mid.x).abs() <= half.x && (p.y - mid.y).abs() <= half.y;
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = FactorGraph::new(k);
            g.add_keyframe(kf(0, cam)).unwrap();
            let mut on_object = 0;
            let n = 1000;
            for pid in 0..n {
                let is_object = rng.random_bool(0.3);
                on_object += usize::from(is_object);
                let p = if is_object {
                    // visible half of the object
                    loop {
                        let q = obj_pose.transform_point(&surface[rng.random_range(0..surface.len())]);
                        if q.x > 0.0 {
                            break q;
                        }
                    }
                } else {
                    loop {
                        let q = Point3::new(rng.random_range(-6.0..0.0), rng.random_range(-6.0..6.0), rng.random_range(-1.0..4.0));
                        if let Ok(px) = k.project(&cam_world.transform_point(&q)) {
                            if k.in_image(&px) && !in_mask(&px) {
                                break q;
                            }
                        }
                    }
                };
                let px = k.project(&cam_world.transform_point(&p)).unwrap();
                g.add_map_point(pid, p, &[(0, px)]).unwrap();
            }
            g.add_object(ObjectHypothesis::new(1, obj_pose, code)).unwrap();
            let got = g.associate_points(1, in_mask).unwrap() as f64 / n as f64;
            assert!((got - 0.3).abs() <= 0.05, "seed {seed}: {got}");
            assert_eq!(got, on_object as f64 / n as f64);
        }
    }

    #[test]
    fn tracking_threshold_and_intervals() {
        assert_eq!(simulate_tracking(0, DEFAULT_TRACKING_THRESHOLD), TrackingStatus::Lost);
        assert_eq!(simulate_tracking(200, DEFAULT_TRACKING_THRESHOLD), TrackingStatus::Tracked);
        assert_eq!(simulate_tracking(30, 30), TrackingStatus::Tracked);
        let mut m = TrackingMonitor::new(30);
        for (f, n) in [100, 20, 10, 50, 50, 5].into_iter().enumerate() {
            m.update(f, n);
        }
        m.finish();
        assert_eq!(m.lost_intervals, vec![(1, 2), (5, 5)]);
    }

    #[test]
    fn ground_truth_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = random_points(&mut rng, 150);
        let mut g = scene(12, &pts, 0.0, 2);
        let before = g.clone();
        let rep = g.joint_optimize(&JointWeights::default(), &JointOptions::default()).unwrap();
        assert!(rep.initial_cost < 1e-12);
        assert_eq!(rep.termination, Termination::SmallGradient);
        assert_eq!(g, before);
    }

    fn perturb(rng: &mut impl Rng, t: &RigidTransform, dist: f64, angle: f64) -> RigidTransform {
        let dir = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
        let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
        RigidTransform::new(UnitQuaternion::from_scaled_axis(axis * angle) * t.rotation, t.translation + dir * dist)
    }

    #[test]
    fn recovers_perturbed_noiseless_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = random_points(&mut rng, 200);
        let truth = scene(15, &pts, 0.0, 3);
        let mut g = truth.clone();
        for kf in g.keyframes.iter_mut().skip(1) {
            kf.pose = perturb(&mut rng, &kf.pose, 0.01, 0.5f64.to_radians());
        }
        let first = g.keyframes[0].pose;
        let rep = g.joint_optimize(&JointWeights::default(), &JointOptions::default()).unwrap();
        assert_eq!(g.keyframes[0].pose, first);
        for w in rep.accepted_costs.windows(2) {
            assert!(w[1] <= w[0]);
        }
        for (a, b) in g.keyframes().iter().zip(truth.keyframes()) {
            assert!((a.pose.translation - b.pose.translation).norm() < 1e-4);
            assert!(a.pose.rotation_angle_to(&b.pose) < 1e-3);
        }
    }

    #[test]
    fn disconnected_graph_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = random_points(&mut rng, 50);
        let mut g = scene(6, &pts, 0.0, 4);
        g.drop_odometry_into(3);
        assert_eq!(g.joint_optimize(&JointWeights::default(), &JointOptions::default()), Err(GraphError::Disconnected(2)));
        assert!(matches!(
            FactorGraph::new(intrinsics()).joint_optimize(&JointWeights::default(), &JointOptions::default()),
            Err(GraphError::Empty)
        ));
    }

    #[test]
    fn object_factors_pull_points_onto_the_surface() {
        let code = ShapeCode::new(0.8, 0.5, 0.4, 0.5, 0.7).unwrap();
        let obj_pose = RigidTransform::new(UnitQuaternion::from_euler_angles(0.0, 0.0, 0.3), Vec3::new(0.0, 0.0, 0.4));
        let surface = extract_mesh_points(&code, 24).unwrap();
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut pts: Vec<Point3> = surface.iter().step_by(3).map(|p| obj_pose.transform_point(p)).collect();
            let n_obj = pts.len();
            pts.extend(random_points(&mut rng, 100).into_iter().map(|p| p + p.coords.normalize() * 2.0));
            let truth = scene(12, &pts, 0.0, seed);
            // accurate odometry isolates the triangulation noise of the points
            let odo = OdometryNoise { rotation_sigma: 1e-4, translation_sigma: 1e-3 };
            let mut noisy = scene_with(12, &pts, 1.5, seed, odo);
            // object points not seen by any keyframe are skipped by scene()
            let obj_ids: Vec<u64> = (0..n_obj as u64).filter(|id| truth.map_point(*id).is_some()).collect();
            let mut hyp = ObjectHypothesis::new(1, obj_pose, code);
            hyp.associated_point_ids = obj_ids.iter().copied().collect();
            hyp.status = HypothesisStatus::Converged;
            noisy.add_object(hyp).unwrap();
            noisy.set_object_factor(1, true).unwrap();
            let mut with = noisy.clone();
            let mut without = noisy.clone();
            let opts = JointOptions { max_iterations: 30, ..Default::default() };
            let weights = JointWeights { object_sigma: 0.005, ..Default::default() };
            with.joint_optimize(&weights, &opts).unwrap();
            without
                .joint_optimize(&weights, &JointOptions { use_object_factors: false, ..opts })
                .unwrap();
            let err = |g: &FactorGraph| {
                obj_ids
                    .iter()
                    .map(|id| (g.map_point(*id).unwrap().position - truth.map_point(*id).unwrap().position).norm())
                    .sum::<f64>()
                    / obj_ids.len() as f64
            };
            let (ew, eo) = (err(&with), err(&without));
            assert!(ew < eo, "seed {seed}: with {ew} without {eo}");
            with.check_consistency().unwrap();
        }
    }
}
