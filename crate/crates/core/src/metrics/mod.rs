//! Landmark decoding and geometric evaluation metrics.

pub mod report;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vec3::{cross, distance, dot, norm, normalize, sub, Vec3};
use crate::volume::{Grid, Heatmap, Landmark, LandmarkSet};

pub use report::{EvalReport, GroupKey, SampleEval, Summary};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeRule {
    /// World position of the argmax voxel.
    #[default]
    Argmax,
    /// Intensity-weighted centroid over the 3x3x3 neighbourhood of the argmax.
    Centroid,
}

impl std::str::FromStr for DecodeRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "argmax" => Ok(DecodeRule::Argmax),
            "centroid" => Ok(DecodeRule::Centroid),
            _ => Err(Error::InvalidArgument(format!("unknown decode rule `{s}` (argmax, centroid)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Extraction {
    pub landmarks: LandmarkSet,
    /// Per channel: the maximum was attained by more than one voxel.
    pub tied: Vec<bool>,
}

/// Index of the maximum (lowest index on ties) and whether it was tied.
pub fn argmax(values: &[f32]) -> (usize, bool) {
    let mut best = 0;
    let mut tied = false;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
            tied = false;
        } else if v == values[best] {
            tied = true;
        }
    }
    (best, tied)
}

fn centroid(grid: &Grid, values: &[f32], peak: usize) -> Vec3 {
    let c = grid.unravel(peak);
    let mut neighbours = Vec::with_capacity(27);
    for dz in -1isize..=1 {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let idx = [c[0] as isize + dz, c[1] as isize + dy, c[2] as isize + dx];
                if (0..3).all(|a| idx[a] >= 0 && (idx[a] as usize) < grid.shape[a]) {
                    let idx = idx.map(|i| i as usize);
                    neighbours.push((idx, values[grid.linear_index(idx)] as f64));
                }
            }
        }
    }
    let floor = neighbours.iter().map(|n| n.1).fold(f64::INFINITY, f64::min);
    let total: f64 = neighbours.iter().map(|n| n.1 - floor).sum();
    if total <= 0.0 {
        return grid.index_world(c);
    }
    let mut acc = [0.0; 3];
    for (idx, v) in &neighbours {
        let p = grid.index_world(*idx);
        for a in 0..3 {
            acc[a] += (v - floor) / total * p[a];
        }
    }
    acc
}

/// Decodes one world-coordinate landmark per heatmap channel.
///
/// Ties resolve to the lowest linear index and set the channel's `tied` flag.
pub fn extract_landmarks(pred: &Heatmap, names: &[String], rule: DecodeRule) -> Result<Extraction> {
    if names.len() != pred.channels {
        return Err(Error::ShapeMismatch {
            expected: format!("{} landmark names", pred.channels),
            actual: names.len().to_string(),
        });
    }
    if let Some(index) = pred.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let mut points = Vec::with_capacity(names.len());
    let mut tied = Vec::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        let ch = pred.channel(i);
        let (peak, t) = argmax(ch);
        if t {
            log::debug!("landmark `{name}`: tied maximum, taking the lowest index");
        }
        let position = match rule {
            DecodeRule::Argmax => pred.grid.index_world(pred.grid.unravel(peak)),
            DecodeRule::Centroid => centroid(&pred.grid, ch, peak),
        };
        points.push(Landmark { name: name.clone(), position });
        tied.push(t);
    }
    Ok(Extraction { landmarks: LandmarkSet::new(points)?, tied })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub point: Vec3,
    /// Unit normal.
    pub normal: Vec3,
}

/// The plane through three points, normal along `(p2 - p1) x (p3 - p1)`.
pub fn plane_from_points(p1: Vec3, p2: Vec3, p3: Vec3) -> Result<Plane> {
    let a = sub(p2, p1);
    let b = sub(p3, p1);
    let n = cross(a, b);
    let scale = norm(a) * norm(b);
    if !(norm(n) > 1e-9 * scale) || scale == 0.0 {
        return Err(Error::Degenerate(format!("points {p1:?}, {p2:?}, {p3:?} are collinear")));
    }
    Ok(Plane { point: p1, normal: normalize(n) })
}

pub fn point_plane_distance(plane: &Plane, q: Vec3) -> f64 {
    dot(sub(q, plane.point), plane.normal).abs()
}

/// Mean of the six distances from each triple to the other triple's plane.
pub fn avg_projection_distance(gt: &[Vec3; 3], pred: &[Vec3; 3]) -> Result<f64> {
    let gt_plane = plane_from_points(gt[0], gt[1], gt[2])?;
    let pred_plane = plane_from_points(pred[0], pred[1], pred[2])?;
    let to_pred: f64 = gt.iter().map(|&p| point_plane_distance(&pred_plane, p)).sum();
    let to_gt: f64 = pred.iter().map(|&p| point_plane_distance(&gt_plane, p)).sum();
    // min/max ordering makes the sum independent of argument order
    Ok((to_pred.min(to_gt) + to_pred.max(to_gt)) / 6.0)
}

/// Angle between unoriented planes, in degrees within [0, 90].
pub fn plane_angle(a: &Plane, b: &Plane) -> f64 {
    dot(a.normal, b.normal).abs().min(1.0).acos().to_degrees()
}

/// Per-landmark Euclidean errors in mm, in `gt` order.
pub fn euclid_errors(gt: &LandmarkSet, pred: &LandmarkSet) -> Result<Vec<(String, f64)>> {
    if gt.len() != pred.len() {
        return Err(Error::NameMismatch(format!("{:?} vs {:?}", gt.names(), pred.names())));
    }
    gt.points
        .iter()
        .map(|g| {
            let p = pred
                .get(&g.name)
                .ok_or_else(|| Error::NameMismatch(format!("`{}` missing from prediction", g.name)))?;
            Ok((g.name.clone(), distance(g.position, p)))
        })
        .collect()
}

/// Fraction of errors strictly below each threshold.
pub fn sdr(errors: &[f64], thresholds: &[f64]) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return Err(Error::InvalidArgument("success detection rate of an empty error list".into()));
    }
    if thresholds.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidArgument("SDR thresholds must be sorted ascending".into()));
    }
    let n = errors.len() as f64;
    Ok(thresholds.iter().map(|&t| errors.iter().filter(|&&e| e < t).count() as f64 / n).collect())
}
