//! Training losses for heatmap regression.
//!
//! The central objective is the optimal-transport classification loss ([`ot_loss`])
//! regularized by the grid Lipschitz penalty ([`grid_lipschitz_penalty`]), combined in
//! [`glip_loss`]. The remaining kinds are the usual dense-prediction baselines, any of
//! which can carry the same grid penalty via [`with_grid_penalty`].
//!
//! All losses work on `f64` batches and return the scalar together with its gradient
//! with respect to the predictions.

pub mod ot1d;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Glip,
    OtOnly,
    Wce,
    Focal,
    Mse,
    L1,
    SmoothL1,
}

impl LossKind {
    pub const ALL: [LossKind; 7] = [
        LossKind::Glip,
        LossKind::OtOnly,
        LossKind::Wce,
        LossKind::Focal,
        LossKind::Mse,
        LossKind::L1,
        LossKind::SmoothL1,
    ];

    /// Whether the loss expects probabilities in (0, 1) from a sigmoid head.
    pub fn is_probabilistic(self) -> bool {
        matches!(self, LossKind::Wce | LossKind::Focal)
    }

    pub fn is_transport(self) -> bool {
        matches!(self, LossKind::Glip | LossKind::OtOnly)
    }

    pub fn label(self) -> &'static str {
        match self {
            LossKind::Glip => "GLiP",
            LossKind::OtOnly => "OT",
            LossKind::Wce => "WCE",
            LossKind::Focal => "FL",
            LossKind::Mse => "MSE",
            LossKind::L1 => "L1",
            LossKind::SmoothL1 => "SL1",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "glip" => LossKind::Glip,
            "ot_only" | "ot" => LossKind::OtOnly,
            "wce" => LossKind::Wce,
            "focal" | "fl" => LossKind::Focal,
            "mse" => LossKind::Mse,
            "l1" => LossKind::L1,
            "smooth_l1" | "sl1" => LossKind::SmoothL1,
            other => return Err(Error::InvalidArgument(format!("unknown loss kind `{other}`"))),
        })
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Selects and parameterizes one loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Penalty coefficient for GLiP and for "+GP" variants.
    pub lambda: f64,
    /// Adds the grid penalty to a non-transport loss.
    pub add_grid_penalty: bool,
    /// Use `max(|d| - 1, 0)^2` instead of `(|d| - 1)^2`.
    pub one_sided_penalty: bool,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub wce_pos_weight: f64,
    pub smooth_l1_beta: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            kind: LossKind::Glip,
            lambda: 10.0,
            add_grid_penalty: false,
            one_sided_penalty: false,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            wce_pos_weight: 10.0,
            smooth_l1_beta: 1.0,
        }
    }
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        Self { kind, ..Default::default() }
    }

    pub fn glip(lambda: f64) -> Self {
        Self { kind: LossKind::Glip, lambda, ..Default::default() }
    }

    /// Short human-readable tag, e.g. `GLiP`, `MSE+GP`.
    pub fn tag(&self) -> String {
        if self.add_grid_penalty {
            format!("{}+GP", self.kind.label())
        } else {
            self.kind.label().to_string()
        }
    }

    /// Whether the grid penalty contributes to this loss.
    pub fn penalized(&self) -> bool {
        self.kind == LossKind::Glip || self.add_grid_penalty
    }

    /// Lists every violated constraint.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            out.push(format!("lambda must be finite and >= 0 (got {})", self.lambda));
        }
        if self.kind == LossKind::Glip && !(self.lambda > 0.0) {
            out.push("glip requires lambda > 0 (use ot_only for the unpenalized ablation)".into());
        }
        if self.kind == LossKind::Glip && self.add_grid_penalty {
            out.push("glip already includes the grid penalty; add_grid_penalty must be false".into());
        }
        if self.kind == LossKind::OtOnly && self.add_grid_penalty {
            out.push("ot_only is the unpenalized transport loss; add_grid_penalty must be false".into());
        }
        if !(self.focal_gamma.is_finite() && self.focal_gamma >= 0.0) {
            out.push(format!("focal_gamma must be >= 0 (got {})", self.focal_gamma));
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            out.push(format!("focal_alpha must lie in (0, 1) (got {})", self.focal_alpha));
        }
        if !(self.wce_pos_weight.is_finite() && self.wce_pos_weight > 0.0) {
            out.push(format!("wce_pos_weight must be > 0 (got {})", self.wce_pos_weight));
        }
        if !(self.smooth_l1_beta.is_finite() && self.smooth_l1_beta > 0.0) {
            out.push(format!("smooth_l1_beta must be > 0 (got {})", self.smooth_l1_beta));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

/// Composes a non-GLiP loss with the grid Lipschitz penalty at coefficient `lambda`.
pub fn with_grid_penalty(base: &LossSpec, lambda: f64) -> Result<LossSpec> {
    if base.kind == LossKind::Glip {
        return Err(Error::InvalidArgument("GLiP already carries the grid penalty".into()));
    }
    Ok(LossSpec { add_grid_penalty: true, lambda, ..base.clone() })
}

/// A dense `(batch, landmarks, d1, d2, d3)` tensor in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchTensor {
    pub shape: [usize; 5],
    pub values: Vec<f64>,
}

/// Network outputs `f_theta(I)^i_v` for a minibatch.
pub type PredictionBatch = BatchTensor;
/// Target heatmaps for a minibatch.
pub type HeatmapBatch = BatchTensor;

impl BatchTensor {
    pub fn new(shape: [usize; 5], values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() || n == 0 {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} (> 0) values for shape {shape:?}"),
                actual: values.len().to_string(),
            });
        }
        Ok(Self { shape, values })
    }

    pub fn filled(shape: [usize; 5], value: f64) -> Self {
        Self { shape, values: vec![value; shape.iter().product()] }
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn landmarks(&self) -> usize {
        self.shape[1]
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn voxels(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    /// The `(b, i)` channel as a flat slice over voxels.
    pub fn channel(&self, b: usize, i: usize) -> &[f64] {
        let v = self.voxels();
        let start = (b * self.landmarks() + i) * v;
        &self.values[start..start + v]
    }

    /// The whole `b`-th sample, `(landmarks, d1, d2, d3)`.
    pub fn sample(&self, b: usize) -> &[f64] {
        let n = self.landmarks() * self.voxels();
        &self.values[b * n..(b + 1) * n]
    }
}

/// A loss value and its gradient with respect to the prediction batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Number of probabilities that had to be clamped into `[eps, 1 - eps]`.
    pub clamped: usize,
}

impl LossValue {
    fn add_scaled(&mut self, other: &LossValue, scale: f64) {
        self.value += scale * other.value;
        for (g, o) in self.grad.iter_mut().zip(&other.grad) {
            *g += scale * o;
        }
        self.clamped += other.clamped;
    }
}

fn check_pair(pred: &PredictionBatch, target: &HeatmapBatch) -> Result<()> {
    if pred.shape != target.shape {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", target.shape),
            actual: format!("{:?}", pred.shape),
        });
    }
    if let Some(i) = pred.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index: i });
    }
    Ok(())
}

fn check_target_range(target: &HeatmapBatch) -> Result<()> {
    if let Some((i, v)) = target.values.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("target value {v} at flat index {i} outside [0, 1]")));
    }
    Ok(())
}

/// Optimal-transport classification loss.
///
/// For each landmark channel the heatmap-weighted mean of the predictions is pulled up
/// and the `(1 - h)`-weighted mean is pushed down. Both weights are pooled over the
/// whole minibatch before dividing; the sum over channels is scaled by `1 / (B * N_l)`.
pub fn ot_loss(pred: &PredictionBatch, target: &HeatmapBatch) -> Result<LossValue> {
    check_pair(pred, target)?;
    check_target_range(target)?;
    let (nb, nl) = (pred.batch(), pred.landmarks());
    let scale = 1.0 / (nb * nl) as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; pred.values.len()];
    let nv = pred.voxels();
    for i in 0..nl {
        // the loss is shift invariant; centring on one prediction makes constants exactly 0
        let reference = pred.channel(0, i)[0];
        let (mut pos_mass, mut neg_mass, mut pos_sum, mut neg_sum) = (0.0, 0.0, 0.0, 0.0);
        for b in 0..nb {
            for (h, f) in target.channel(b, i).iter().zip(pred.channel(b, i)) {
                let f = f - reference;
                pos_mass += h;
                neg_mass += 1.0 - h;
                pos_sum += h * f;
                neg_sum += (1.0 - h) * f;
            }
        }
        if pos_mass <= 0.0 || neg_mass <= 0.0 {
            return Err(Error::ZeroDenominator {
                channel: i,
                detail: format!("heatmap mass {pos_mass}, complement mass {neg_mass} over the batch"),
            });
        }
        value += scale * (-pos_sum / pos_mass + neg_sum / neg_mass);
        for b in 0..nb {
            let start = (b * nl + i) * nv;
            for (g, h) in grad[start..start + nv].iter_mut().zip(target.channel(b, i)) {
                *g = scale * (-h / pos_mass + (1.0 - h) / neg_mass);
            }
        }
    }
    Ok(LossValue { value, grad, clamped: 0 })
}

/// Grid penalty of one `(landmarks, d1, d2, d3)` sample; adds its gradient into `grad`.
///
/// Sums `(|f_u - f_v| - 1)^2` over every unordered pair of axis-adjacent voxels and every
/// channel. The subgradient at `f_u == f_v` is zero.
pub fn grid_penalty_sample(
    values: &[f64],
    landmarks: usize,
    dims: [usize; 3],
    one_sided: bool,
    grad: &mut [f64],
    grad_scale: f64,
) -> f64 {
    let [d1, d2, d3] = dims;
    let nv = d1 * d2 * d3;
    let strides = [d2 * d3, d3, 1];
    let mut total = 0.0;
    for i in 0..landmarks {
        let base = i * nv;
        for axis in 0..3 {
            let s = strides[axis];
            for z in 0..d1 {
                for y in 0..d2 {
                    for x in 0..d3 {
                        let pos = [z, y, x];
                        if pos[axis] + 1 >= dims[axis] {
                            continue;
                        }
                        let u = base + z * strides[0] + y * strides[1] + x;
                        let v = u + s;
                        let diff = values[v] - values[u];
                        let excess = diff.abs() - 1.0;
                        if one_sided && excess <= 0.0 {
                            continue;
                        }
                        total += excess * excess;
                        let dv = grad_scale * 2.0 * excess * signum0(diff);
                        grad[v] += dv;
                        grad[u] -= dv;
                    }
                }
            }
        }
    }
    total
}

#[inline]
fn signum0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Number of axis-adjacent voxel pairs on a grid.
pub fn edge_count(dims: [usize; 3]) -> usize {
    let [a, b, c] = dims;
    (a - 1) * b * c + a * (b - 1) * c + a * b * (c - 1)
}

/// Batch mean of the per-sample grid penalty, `(1/|B|) * sum_b P(I^b)`.
pub fn grid_lipschitz_penalty(pred: &PredictionBatch, one_sided: bool) -> Result<LossValue> {
    if let Some(i) = pred.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index: i });
    }
    let nb = pred.batch();
    let per = pred.landmarks() * pred.voxels();
    let mut grad = vec![0.0; pred.values.len()];
    let scale = 1.0 / nb as f64;
    let mut value = 0.0;
    for b in 0..nb {
        value += scale
            * grid_penalty_sample(
                pred.sample(b),
                pred.landmarks(),
                pred.dims(),
                one_sided,
                &mut grad[b * per..(b + 1) * per],
                scale,
            );
    }
    Ok(LossValue { value, grad, clamped: 0 })
}

/// Transport loss plus `lambda` times the batch-mean grid penalty.
pub fn glip_loss(pred: &PredictionBatch, target: &HeatmapBatch, lambda: f64, one_sided: bool) -> Result<LossValue> {
    let mut out = ot_loss(pred, target)?;
    if lambda != 0.0 {
        let pen = grid_lipschitz_penalty(pred, one_sided)?;
        out.add_scaled(&pen, lambda);
    }
    Ok(out)
}

/// Voxel-mean weighted binary cross-entropy, `-(w h log p + (1 - h) log(1 - p))`.
pub fn wce_loss(pred: &PredictionBatch, target: &HeatmapBatch, pos_weight: f64) -> Result<LossValue> {
    check_pair(pred, target)?;
    let n = pred.values.len() as f64;
    let mut out = LossValue { value: 0.0, grad: vec![0.0; pred.values.len()], clamped: 0 };
    for ((p, h), g) in pred.values.iter().zip(&target.values).zip(out.grad.iter_mut()) {
        let (pc, inside) = clamp_prob(*p);
        if !inside {
            out.clamped += 1;
        }
        out.value -= (pos_weight * h * pc.ln() + (1.0 - h) * (1.0 - pc).ln()) / n;
        if inside {
            *g = (-pos_weight * h / pc + (1.0 - h) / (1.0 - pc)) / n;
        }
    }
    Ok(out)
}

#[inline]
fn clamp_prob(p: f64) -> (f64, bool) {
    let c = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    (c, c == p)
}

/// Voxel-mean alpha-balanced focal loss with soft targets:
/// `-(alpha h (1-p)^gamma log p + (1-alpha)(1-h) p^gamma log(1-p))`.
pub fn focal_loss(pred: &PredictionBatch, target: &HeatmapBatch, gamma: f64, alpha: f64) -> Result<LossValue> {
    check_pair(pred, target)?;
    let n = pred.values.len() as f64;
    let mut out = LossValue { value: 0.0, grad: vec![0.0; pred.values.len()], clamped: 0 };
    for ((p, h), g) in pred.values.iter().zip(&target.values).zip(out.grad.iter_mut()) {
        let (pc, inside) = clamp_prob(*p);
        if !inside {
            out.clamped += 1;
        }
        let q = p.clamp(0.0, 1.0);
        let pos_w = alpha * h;
        let neg_w = (1.0 - alpha) * (1.0 - h);
        let one_minus_pow = (1.0 - q).powf(gamma);
        let pow = q.powf(gamma);
        let (log_p, log_1mp) = (pc.ln(), (1.0 - pc).ln());
        let a = if pos_w == 0.0 || one_minus_pow == 0.0 { 0.0 } else { pos_w * one_minus_pow * log_p };
        let b = if neg_w == 0.0 || pow == 0.0 { 0.0 } else { neg_w * pow * log_1mp };
        out.value -= (a + b) / n;
        if inside {
            let da = pos_w * (-gamma * (1.0 - q).powf(gamma - 1.0) * log_p + one_minus_pow / pc);
            let db = neg_w * (gamma * q.powf(gamma - 1.0) * log_1mp - pow / (1.0 - pc));
            *g = -(da + db) / n;
        }
    }
    Ok(out)
}

pub fn mse_loss(pred: &PredictionBatch, target: &HeatmapBatch) -> Result<LossValue> {
    check_pair(pred, target)?;
    let n = pred.values.len() as f64;
    let mut value = 0.0;
    let grad = pred
        .values
        .iter()
        .zip(&target.values)
        .map(|(f, h)| {
            let d = f - h;
            value += d * d / n;
            2.0 * d / n
        })
        .collect();
    Ok(LossValue { value, grad, clamped: 0 })
}

pub fn l1_loss(pred: &PredictionBatch, target: &HeatmapBatch) -> Result<LossValue> {
    check_pair(pred, target)?;
    let n = pred.values.len() as f64;
    let mut value = 0.0;
    let grad = pred
        .values
        .iter()
        .zip(&target.values)
        .map(|(f, h)| {
            let d = f - h;
            value += d.abs() / n;
            signum0(d) / n
        })
        .collect();
    Ok(LossValue { value, grad, clamped: 0 })
}

/// Huber-style smooth L1 with threshold `beta`.
pub fn smooth_l1_loss(pred: &PredictionBatch, target: &HeatmapBatch, beta: f64) -> Result<LossValue> {
    check_pair(pred, target)?;
    let n = pred.values.len() as f64;
    let mut value = 0.0;
    let grad = pred
        .values
        .iter()
        .zip(&target.values)
        .map(|(f, h)| {
            let d = f - h;
            if d.abs() < beta {
                value += 0.5 * d * d / beta / n;
                d / beta / n
            } else {
                value += (d.abs() - 0.5 * beta) / n;
                signum0(d) / n
            }
        })
        .collect();
    Ok(LossValue { value, grad, clamped: 0 })
}

/// Evaluates the loss selected by `spec`, including the "+GP" penalty when requested.
pub fn evaluate(spec: &LossSpec, pred: &PredictionBatch, target: &HeatmapBatch) -> Result<LossValue> {
    let mut out = match spec.kind {
        LossKind::Glip => return glip_loss(pred, target, spec.lambda, spec.one_sided_penalty),
        LossKind::OtOnly => return ot_loss(pred, target),
        LossKind::Wce => wce_loss(pred, target, spec.wce_pos_weight)?,
        LossKind::Focal => focal_loss(pred, target, spec.focal_gamma, spec.focal_alpha)?,
        LossKind::Mse => mse_loss(pred, target)?,
        LossKind::L1 => l1_loss(pred, target)?,
        LossKind::SmoothL1 => smooth_l1_loss(pred, target, spec.smooth_l1_beta)?,
    };
    if spec.add_grid_penalty && spec.lambda != 0.0 {
        let pen = grid_lipschitz_penalty(pred, spec.one_sided_penalty)?;
        out.add_scaled(&pen, spec.lambda);
    }
    if out.clamped > 0 {
        log::debug!("{}: clamped {} probabilities into [eps, 1 - eps]", spec.tag(), out.clamped);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_voxel(f: [f64; 2], h: [f64; 2]) -> (BatchTensor, BatchTensor) {
        (
            BatchTensor::new([1, 1, 2, 1, 1], f.to_vec()).unwrap(),
            BatchTensor::new([1, 1, 2, 1, 1], h.to_vec()).unwrap(),
        )
    }

    #[test]
    fn ot_two_voxel_expansion() {
        let (f, h) = two_voxel([1.0, 0.0], [1.0, 0.0]);
        assert_eq!(ot_loss(&f, &h).unwrap().value, -1.0);
        let (f, h) = two_voxel([0.3, 2.5], [1.0, 0.0]);
        assert_eq!(ot_loss(&f, &h).unwrap().value, 2.5 - 0.3);
    }

    #[test]
    fn ot_constant_prediction_is_zero() {
        let h = BatchTensor::new([1, 2, 2, 2, 1], vec![0.1, 0.9, 0.5, 0.0, 1.0, 0.2, 0.3, 0.7]).unwrap();
        let f = BatchTensor::filled(h.shape, 4.25);
        assert_eq!(ot_loss(&f, &h).unwrap().value, 0.0);
    }

    #[test]
    fn ot_rejects_degenerate_channels() {
        let (f, h) = two_voxel([1.0, 0.0], [0.0, 0.0]);
        assert!(matches!(ot_loss(&f, &h), Err(Error::ZeroDenominator { channel: 0, .. })));
        let (f, h) = two_voxel([1.0, 0.0], [1.0, 1.0]);
        assert!(matches!(ot_loss(&f, &h), Err(Error::ZeroDenominator { .. })));
        let (f, h) = two_voxel([1.0, 0.0], [1.5, 0.0]);
        assert!(ot_loss(&f, &h).is_err());
    }

    #[test]
    fn penalty_two_voxel_cases() {
        for (f, expected) in [([3.0, 3.0], 1.0), ([0.0, 1.0], 0.0), ([0.0, 2.0], 1.0)] {
            let p = BatchTensor::new([1, 1, 2, 1, 1], f.to_vec()).unwrap();
            assert_eq!(grid_lipschitz_penalty(&p, false).unwrap().value, expected);
        }
    }

    #[test]
    fn one_sided_penalty_ignores_small_slopes() {
        let p = BatchTensor::new([1, 1, 2, 1, 1], vec![0.0, 0.5]).unwrap();
        assert_eq!(grid_lipschitz_penalty(&p, true).unwrap().value, 0.0);
        let p = BatchTensor::new([1, 1, 2, 1, 1], vec![0.0, 3.0]).unwrap();
        assert_eq!(grid_lipschitz_penalty(&p, true).unwrap().value, 4.0);
    }

    #[test]
    fn glip_two_voxel_case() {
        // ot = -0/1 + 1/1 = 1; the single edge has |1 - 0| - 1 = 0.
        let (f, h) = two_voxel([0.0, 1.0], [1.0, 0.0]);
        assert_eq!(glip_loss(&f, &h, 1.0, false).unwrap().value, 1.0);
    }

    #[test]
    fn wce_single_voxel() {
        let f = BatchTensor::new([1, 1, 1, 1, 1], vec![(-1.0f64).exp()]).unwrap();
        let h = BatchTensor::new([1, 1, 1, 1, 1], vec![1.0]).unwrap();
        let v = wce_loss(&f, &h, 3.0).unwrap().value;
        assert!((v - 3.0).abs() < 1e-12);
    }

    #[test]
    fn wce_clamps_out_of_range_probabilities() {
        let f = BatchTensor::new([1, 1, 2, 1, 1], vec![0.0, 1.2]).unwrap();
        let h = BatchTensor::new([1, 1, 2, 1, 1], vec![1.0, 0.0]).unwrap();
        let out = wce_loss(&f, &h, 1.0).unwrap();
        assert_eq!(out.clamped, 2);
        assert!(out.value.is_finite());
    }

    #[test]
    fn focal_perfect_positive_contributes_zero() {
        let f = BatchTensor::new([1, 1, 1, 1, 1], vec![1.0]).unwrap();
        let h = BatchTensor::new([1, 1, 1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(focal_loss(&f, &h, 2.0, 0.25).unwrap().value, 0.0);
    }

    #[test]
    fn regression_losses_vanish_at_target() {
        let h = BatchTensor::new([1, 1, 3, 1, 1], vec![0.2, 0.5, 1.0]).unwrap();
        assert_eq!(mse_loss(&h, &h).unwrap().value, 0.0);
        assert_eq!(l1_loss(&h, &h).unwrap().value, 0.0);
        assert_eq!(smooth_l1_loss(&h, &h, 1.0).unwrap().value, 0.0);
    }

    #[test]
    fn smooth_l1_branches() {
        let (f, h) = two_voxel([0.5, 3.0], [0.0, 0.0]);
        // (0.5 * 0.25 + (3 - 0.5)) / 2
        let v = smooth_l1_loss(&f, &h, 1.0).unwrap().value;
        assert!((v - (0.125 + 2.5) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn grid_penalty_constant_prediction_counts_edges() {
        let h = BatchTensor::new([1, 1, 2, 1, 1], vec![1.0, 0.0]).unwrap();
        let f = BatchTensor::filled([1, 3, 2, 3, 4], 0.7);
        let spec = with_grid_penalty(&LossSpec::new(LossKind::Mse), 2.5).unwrap();
        let target = BatchTensor::filled(f.shape, 0.7);
        let v = evaluate(&spec, &f, &target).unwrap().value;
        assert_eq!(v, 2.5 * (edge_count([2, 3, 4]) * 3) as f64);
        assert!(with_grid_penalty(&LossSpec::glip(1.0), 1.0).is_err());
        let _ = h;
    }

    #[test]
    fn spec_validation_lists_every_problem() {
        let spec = LossSpec {
            kind: LossKind::Glip,
            lambda: 0.0,
            add_grid_penalty: true,
            focal_alpha: 1.5,
            ..Default::default()
        };
        match spec.validate() {
            Err(Error::Config(p)) => assert_eq!(p.len(), 3, "{p:?}"),
            other => panic!("{other:?}"),
        }
        assert!(LossSpec::default().validate().is_ok());
    }

    #[test]
    fn kind_parses_from_cli_names() {
        assert_eq!("glip".parse::<LossKind>().unwrap(), LossKind::Glip);
        assert_eq!("smooth-l1".parse::<LossKind>().unwrap(), LossKind::SmoothL1);
        assert!("bogus".parse::<LossKind>().is_err());
    }
}
