//! Reconstruction-quality metrics: distance-thresholded precision, recall
//! and F-score, RMSE of the distance from predicted mesh points to the
//! ground-truth cloud, and Monte-Carlo IoU of oriented 3D boxes.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, OrientedBox3, Point3, SimilarityTransform, Vec3};
use crate::reconstruction::{HypothesisStatus, ObjectHypothesis};
use crate::sdf::{extract_mesh_points, tight_bounding_box, SdfError};

/// Minimum samples per axis for the IoU estimate (`32³` samples).
pub const MIN_IOU_SAMPLES_PER_AXIS: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("{0} point set is empty")]
    EmptySet(&'static str),
    #[error("distance threshold must be positive, got {0}")]
    InvalidThreshold(f64),
    #[error("IoU resolution {0} below minimum {MIN_IOU_SAMPLES_PER_AXIS} samples per axis")]
    ResolutionTooLow(usize),
    #[error("object has not converged (status {0:?})")]
    NotConverged(HypothesisStatus),
    #[error(transparent)]
    Shape(#[from] SdfError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

type CellKey = (i64, i64, i64);

/// Uniform grid hash over a point set with exact nearest-neighbour queries.
pub struct GridIndex<'a> {
    points: &'a [Point3],
    cell: f64,
    cells: HashMap<CellKey, Vec<usize>>,
    lo: CellKey,
    hi: CellKey,
}

impl<'a> GridIndex<'a> {
    pub fn new(points: &'a [Point3], cell: f64) -> Self {
        assert!(cell > 0.0 && cell.is_finite(), "grid cell must be positive");
        let mut cells: HashMap<CellKey, Vec<usize>> = HashMap::new();
        let mut lo = (i64::MAX, i64::MAX, i64::MAX);
        let mut hi = (i64::MIN, i64::MIN, i64::MIN);
        for (i, p) in points.iter().enumerate() {
            let k = key(p, cell);
            lo = (lo.0.min(k.0), lo.1.min(k.1), lo.2.min(k.2));
            hi = (hi.0.max(k.0), hi.1.max(k.1), hi.2.max(k.2));
            cells.entry(k).or_default().push(i);
        }
        Self {
            points,
            cell,
            cells,
            lo,
            hi,
        }
    }

    /// Cell size giving a few points per occupied cell on a surface sample.
    pub fn auto_cell(points: &[Point3]) -> f64 {
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let diag = (hi - lo).norm();
        let cell = diag / (points.len() as f64).sqrt().max(1.0);
        if cell > 0.0 && cell.is_finite() {
            cell
        } else {
            1.0
        }
    }

    fn scan(&self, k: CellKey, p: &Point3, best: &mut (usize, f64)) {
        if let Some(ids) = self.cells.get(&k) {
            for &i in ids {
                let d = (self.points[i] - p).norm_squared();
                if d < best.1 || (d == best.1 && i < best.0) {
                    *best = (i, d);
                }
            }
        }
    }

    /// Index of and distance to the nearest indexed point. Ties go to the
    /// lower index.
    pub fn nearest(&self, p: &Point3) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let c = key(p, self.cell);
        let gap = |q: i64, lo: i64, hi: i64| (lo - q).max(q - hi).max(0);
        let start = gap(c.0, self.lo.0, self.hi.0)
            .max(gap(c.1, self.lo.1, self.hi.1))
            .max(gap(c.2, self.lo.2, self.hi.2));
        let reach = (c.0 - self.lo.0).abs().max((c.0 - self.hi.0).abs())
            .max((c.1 - self.lo.1).abs().max((c.1 - self.hi.1).abs()))
            .max((c.2 - self.lo.2).abs().max((c.2 - self.hi.2).abs()));
        let mut best = (usize::MAX, f64::INFINITY);
        let mut r = start;
        while r <= reach {
            let shell_cells = (2 * r + 1).pow(3) - (2 * r - 1).max(0).pow(3);
            if shell_cells as usize > self.points.len() {
                // sparse relative to the cell size: a linear scan is cheaper
                for (i, q) in self.points.iter().enumerate() {
                    let d = (q - p).norm_squared();
                    if d < best.1 || (d == best.1 && i < best.0) {
                        best = (i, d);
                    }
                }
                break;
            }
            for dx in -r..=r {
                for dy in -r..=r {
                    let edge = dx.abs() == r || dy.abs() == r;
                    if edge {
                        for dz in -r..=r {
                            self.scan((c.0 + dx, c.1 + dy, c.2 + dz), p, &mut best);
                        }
                    } else {
                        self.scan((c.0 + dx, c.1 + dy, c.2 - r), p, &mut best);
                        self.scan((c.0 + dx, c.1 + dy, c.2 + r), p, &mut best);
                    }
                }
            }
            // anything in shell r+1 or beyond is at least r*cell away
            if best.1.is_finite() && best.1.sqrt() <= r as f64 * self.cell {
                break;
            }
            r += 1;
        }
        Some((best.0, best.1.sqrt()))
    }

    /// Whether any indexed point lies within `radius <= cell` of `p`.
    pub fn any_within(&self, p: &Point3, radius: f64) -> bool {
        debug_assert!(radius <= self.cell * (1.0 + 1e-12));
        let c = key(p, self.cell);
        let r2 = radius * radius;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(ids) = self.cells.get(&(c.0 + dx, c.1 + dy, c.2 + dz)) {
                        if ids.iter().any(|&i| (self.points[i] - p).norm_squared() <= r2) {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }
}

fn key(p: &Point3, cell: f64) -> CellKey {
    (
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrfScores {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

/// Harmonic mean, zero when both inputs are zero.
pub fn f_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

fn fraction_within(from: &[Point3], to: &GridIndex<'_>, tau: f64) -> f64 {
    let hits: Vec<bool> = from.par_iter().map(|p| to.any_within(p, tau)).collect();
    hits.iter().filter(|h| **h).count() as f64 / from.len() as f64
}

/// Precision: share of predicted points within `tau` of the ground truth.
/// Recall: share of ground-truth points within `tau` of the prediction.
pub fn precision_recall_fscore(
    predicted: &[Point3],
    ground_truth: &[Point3],
    tau: f64,
) -> Result<PrfScores, MetricsError> {
    if predicted.is_empty() {
        return Err(MetricsError::EmptySet("predicted"));
    }
    if ground_truth.is_empty() {
        return Err(MetricsError::EmptySet("ground truth"));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(MetricsError::InvalidThreshold(tau));
    }
    let gt_index = GridIndex::new(ground_truth, tau);
    let pred_index = GridIndex::new(predicted, tau);
    let precision = fraction_within(predicted, &gt_index, tau);
    let recall = fraction_within(ground_truth, &pred_index, tau);
    Ok(PrfScores {
        precision,
        recall,
        f_score: f_score(precision, recall),
    })
}

/// Root mean square of the distance from each predicted point to its
/// nearest ground-truth point.
pub fn rmse_sdf(predicted: &[Point3], ground_truth: &[Point3]) -> Result<f64, MetricsError> {
    if predicted.is_empty() {
        return Err(MetricsError::EmptySet("predicted"));
    }
    if ground_truth.is_empty() {
        return Err(MetricsError::EmptySet("ground truth"));
    }
    let index = GridIndex::new(ground_truth, GridIndex::auto_cell(ground_truth));
    let sq: Vec<f64> = predicted
        .par_iter()
        .map(|p| index.nearest(p).expect("non-empty index").1.powi(2))
        .collect();
    Ok((sq.iter().sum::<f64>() / predicted.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IouEstimate {
    pub iou: f64,
    pub standard_error: f64,
    /// Samples that fell inside the union.
    pub union_samples: u64,
}

/// Monte-Carlo IoU of two oriented boxes.
///
/// Draws one jittered sample per cell of an `n³` grid over the axis-aligned
/// hull of both boxes and classifies each against both. The sample set
/// depends only on the hull and the seed, so the estimate is symmetric in
/// its arguments.
pub fn iou_3d(
    a: &OrientedBox3,
    b: &OrientedBox3,
    samples_per_axis: usize,
    seed: u64,
) -> Result<IouEstimate, MetricsError> {
    if samples_per_axis < MIN_IOU_SAMPLES_PER_AXIS {
        return Err(MetricsError::ResolutionTooLow(samples_per_axis));
    }
    let (alo, ahi) = a.aabb();
    let (blo, bhi) = b.aabb();
    let disjoint = (0..3).any(|i| ahi[i] < blo[i] || bhi[i] < alo[i]);
    if disjoint {
        return Ok(IouEstimate {
            iou: 0.0,
            standard_error: 0.0,
            union_samples: 0,
        });
    }
    let lo = alo.inf(&blo);
    let hi = ahi.sup(&bhi);
    let span = hi - lo;
    let n = samples_per_axis;
    let counts: Vec<(u64, u64, u64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let (mut in_a, mut in_b, mut both) = (0u64, 0u64, 0u64);
            for j in 0..n {
                for k in 0..n {
                    let u = (i as f64 + rng.random::<f64>()) / n as f64;
                    let v = (j as f64 + rng.random::<f64>()) / n as f64;
                    let w = (k as f64 + rng.random::<f64>()) / n as f64;
                    let p = Point3::new(lo.x + u * span.x, lo.y + v * span.y, lo.z + w * span.z);
                    let (ia, ib) = (a.contains(&p), b.contains(&p));
                    in_a += ia as u64;
                    in_b += ib as u64;
                    both += (ia && ib) as u64;
                }
            }
            (in_a, in_b, both)
        })
        .collect();
    let (in_a, in_b, both) = counts
        .iter()
        .fold((0, 0, 0), |acc, c| (acc.0 + c.0, acc.1 + c.1, acc.2 + c.2));
    let union = in_a + in_b - both;
    if union == 0 {
        return Ok(IouEstimate {
            iou: 0.0,
            standard_error: 0.0,
            union_samples: 0,
        });
    }
    let iou = both as f64 / union as f64;
    Ok(IouEstimate {
        iou,
        standard_error: (iou * (1.0 - iou) / union as f64).sqrt(),
        union_samples: union,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalParams {
    /// Distance threshold for precision/recall (meters).
    pub tau: f64,
    pub iou_samples_per_axis: usize,
    pub mesh_resolution: usize,
    pub seed: u64,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            tau: 0.05,
            iou_samples_per_axis: 64,
            mesh_resolution: 128,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub rmse_sdf: f64,
    pub iou: f64,
    pub iou_standard_error: f64,
    pub associated_point_count: usize,
    pub distance_threshold: f64,
    pub iou_samples_per_axis: usize,
    pub mesh_resolution: usize,
}

/// Mesh points of a reconstructed object mapped into the evaluation frame.
pub fn object_mesh_world(
    object: &ObjectHypothesis,
    to_world: &SimilarityTransform,
    resolution: usize,
) -> Result<Vec<Point3>, MetricsError> {
    let local = extract_mesh_points(&object.code, resolution)?;
    Ok(local
        .iter()
        .map(|p| to_world.transform_point(&object.pose.transform_point(p)))
        .collect())
}

/// Scores a converged object against a ground-truth cloud and box.
/// `to_world` maps the object's frame (e.g. the SLAM frame) into the
/// ground-truth frame.
pub fn evaluate_run(
    object: &ObjectHypothesis,
    to_world: &SimilarityTransform,
    ground_truth_cloud: &[Point3],
    ground_truth_box: &OrientedBox3,
    params: &EvalParams,
) -> Result<MetricsReport, MetricsError> {
    if object.status != HypothesisStatus::Converged {
        return Err(MetricsError::NotConverged(object.status));
    }
    let mesh = object_mesh_world(object, to_world, params.mesh_resolution)?;
    let prf = precision_recall_fscore(&mesh, ground_truth_cloud, params.tau)?;
    let rmse = rmse_sdf(&mesh, ground_truth_cloud)?;
    let predicted_box = tight_bounding_box(&object.code, &object.pose).transformed_similarity(to_world);
    let iou = iou_3d(&predicted_box, ground_truth_box, params.iou_samples_per_axis, params.seed)?;
    Ok(MetricsReport {
        precision: prf.precision,
        recall: prf.recall,
        f_score: prf.f_score,
        rmse_sdf: rmse,
        iou: iou.iou,
        iou_standard_error: iou.standard_error,
        associated_point_count: object.associated_point_ids.len(),
        distance_threshold: params.tau,
        iou_samples_per_axis: params.iou_samples_per_axis,
        mesh_resolution: params.mesh_resolution,
    })
}

/// Scores of one saved point cloud against another.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CloudReport {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub rmse_sdf: f64,
    /// IoU of the two clouds' axis-aligned bounding boxes.
    pub iou: f64,
    pub iou_standard_error: f64,
    pub predicted_points: usize,
    pub ground_truth_points: usize,
    pub distance_threshold: f64,
}

/// Axis-aligned bounding box of a cloud; flat extents are padded to `1e-9`.
pub fn cloud_bounding_box(points: &[Point3]) -> Result<OrientedBox3, MetricsError> {
    let first = points.first().ok_or(MetricsError::EmptySet("bounding"))?;
    let (lo, hi) = points.iter().fold((*first, *first), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
    let half: Vec3 = ((hi - lo) * 0.5).map(|h| h.max(1e-9));
    Ok(OrientedBox3::axis_aligned(nalgebra::center(&lo, &hi), half)?)
}

/// Compares two clouds that carry no pose, e.g. PLY files from earlier runs.
pub fn evaluate_clouds(
    predicted: &[Point3],
    ground_truth: &[Point3],
    tau: f64,
    iou_samples_per_axis: usize,
    seed: u64,
) -> Result<CloudReport, MetricsError> {
    let prf = precision_recall_fscore(predicted, ground_truth, tau)?;
    let rmse = rmse_sdf(predicted, ground_truth)?;
    let iou = iou_3d(
        &cloud_bounding_box(predicted)?,
        &cloud_bounding_box(ground_truth)?,
        iou_samples_per_axis,
        seed,
    )?;
    Ok(CloudReport {
        precision: prf.precision,
        recall: prf.recall,
        f_score: prf.f_score,
        rmse_sdf: rmse,
        iou: iou.iou,
        iou_standard_error: iou.standard_error,
        predicted_points: predicted.len(),
        ground_truth_points: ground_truth.len(),
        distance_threshold: tau,
    })
}
