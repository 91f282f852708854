//! Oracles and generators shared by the property suites and the acceptance target.
#![allow(dead_code)]

use glip_core::loss::{evaluate, with_grid_penalty, BatchTensor};
use glip_core::metrics::argmax;
use glip_core::vec3::{add, cross, norm, sub, Vec3};
use glip_core::volume::{generate_heatmap, Grid, HeatmapConfig, LandmarkSet};
use glip_core::{LossKind, LossSpec};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Batch 2, 3 landmarks, 4x5x2 voxels.
pub const GRAD_SHAPE: [usize; 5] = [2, 3, 4, 5, 2];
pub const FD_STEP: f64 = 1e-4;
pub const FD_RTOL: f64 = 1e-3;

/// Every loss of the zoo, the penalized variants of the non-transport ones and the
/// one-sided GLiP.
pub fn loss_specs() -> Vec<LossSpec> {
    let mut out: Vec<LossSpec> = LossKind::ALL.iter().map(|&k| LossSpec::new(k)).collect();
    for k in [LossKind::Wce, LossKind::Focal, LossKind::Mse, LossKind::L1, LossKind::SmoothL1] {
        out.push(with_grid_penalty(&LossSpec::new(k), 0.7).unwrap());
    }
    out.push(LossSpec { one_sided_penalty: true, ..LossSpec::glip(2.0) });
    out
}

fn edges(dims: [usize; 3]) -> Vec<(usize, usize)> {
    let [a, b, c] = dims;
    let idx = |i: usize, j: usize, k: usize| (i * b + j) * c + k;
    let mut e = Vec::new();
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                if i + 1 < a {
                    e.push((idx(i, j, k), idx(i + 1, j, k)));
                }
                if j + 1 < b {
                    e.push((idx(i, j, k), idx(i, j + 1, k)));
                }
                if k + 1 < c {
                    e.push((idx(i, j, k), idx(i, j, k + 1)));
                }
            }
        }
    }
    e
}

/// Random prediction/target pair kept at least `10 h` away from every kink of `spec`:
/// equal neighbours for the penalty and `pred == target` for L1.
pub fn random_loss_inputs(rng: &mut ChaCha8Rng, spec: &LossSpec) -> (BatchTensor, BatchTensor) {
    let n: usize = GRAD_SHAPE.iter().product();
    let nv: usize = GRAD_SHAPE[2..].iter().product();
    let e = edges([GRAD_SHAPE[2], GRAD_SHAPE[3], GRAD_SHAPE[4]]);
    let gap = 10.0 * FD_STEP;
    loop {
        let target: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let pred: Vec<f64> = if spec.kind.is_probabilistic() {
            (0..n).map(|_| rng.random_range(0.05..0.95)).collect()
        } else {
            (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
        };
        // stay clear of every point where a stencil would straddle a kink or a curvature jump
        let residual_ok = |at: f64| pred.iter().zip(&target).all(|(p, t)| ((p - t).abs() - at).abs() > gap);
        let base_ok = match spec.kind {
            LossKind::L1 => residual_ok(0.0),
            LossKind::SmoothL1 => residual_ok(spec.smooth_l1_beta),
            _ => true,
        };
        let edge_ok = |d: f64| d.abs() > gap && (!spec.one_sided_penalty || (d.abs() - 1.0).abs() > gap);
        let untied = !spec.penalized()
            || (0..n / nv).all(|c| e.iter().all(|&(u, v)| edge_ok(pred[c * nv + u] - pred[c * nv + v])));
        if base_ok && untied {
            return (BatchTensor::new(GRAD_SHAPE, pred).unwrap(), BatchTensor::new(GRAD_SHAPE, target).unwrap());
        }
    }
}

/// Largest relative deviation between the analytic gradient and central differences.
///
/// Uses the five-point stencil: with the three-point one, components whose derivative
/// nearly vanishes are swamped by the `h^2 f'''` truncation term.
pub fn fd_gradient_error(spec: &LossSpec, pred: &BatchTensor, target: &BatchTensor) -> f64 {
    let analytic = evaluate(spec, pred, target).unwrap().grad;
    let mut worst = 0.0f64;
    let mut p = pred.clone();
    for k in 0..p.values.len() {
        let x = p.values[k];
        let mut at = |d: f64| {
            p.values[k] = x + d;
            evaluate(spec, &p, target).unwrap().value
        };
        let h = FD_STEP;
        let numeric = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
        p.values[k] = x;
        let a = analytic[k];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

/// Direct scalar evaluation of the grid penalty of one `(d1, d2, d3)` field.
pub fn penalty_oracle(field: &[f64], dims: [usize; 3]) -> f64 {
    edges(dims).iter().map(|&(u, v)| ((field[u] - field[v]).abs() - 1.0).powi(2)).sum()
}

/// `total` unit masses dropped into `bins` bins.
pub fn random_units(rng: &mut ChaCha8Rng, bins: usize, total: usize) -> Vec<usize> {
    let mut m = vec![0; bins];
    for _ in 0..total {
        m[rng.random_range(0..bins)] += 1;
    }
    m
}

/// Minimum transport cost over every pairing of unit masses, divided by the unit count.
pub fn exhaustive_w1(mu: &[usize], nu: &[usize], spacing: f64) -> f64 {
    let src: Vec<usize> = mu.iter().enumerate().flat_map(|(i, &m)| std::iter::repeat_n(i, m)).collect();
    let dst: Vec<usize> = nu.iter().enumerate().flat_map(|(i, &m)| std::iter::repeat_n(i, m)).collect();
    assert_eq!(src.len(), dst.len());
    fn search(src: &[usize], dst: &mut Vec<usize>, k: usize, cost: usize, best: &mut usize) {
        if cost >= *best {
            return;
        }
        if k == src.len() {
            *best = cost;
            return;
        }
        for j in k..dst.len() {
            dst.swap(k, j);
            search(src, dst, k + 1, cost + src[k].abs_diff(dst[k]), best);
            dst.swap(k, j);
        }
    }
    let mut best = usize::MAX;
    search(&src, &mut dst.clone(), 0, 0, &mut best);
    spacing * best as f64 / src.len() as f64
}

/// Three points whose triangle is far from degenerate.
pub fn random_triple(rng: &mut ChaCha8Rng) -> [Vec3; 3] {
    loop {
        let t: [Vec3; 3] = std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-20.0..20.0)));
        let area = norm(cross(sub(t[1], t[0]), sub(t[2], t[0])));
        if area > 10.0 {
            return t;
        }
    }
}

/// A random rotation (unit quaternion) followed by a translation.
pub struct Rigid {
    r: [[f64; 3]; 3],
    t: Vec3,
}

impl Rigid {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let q: [f64; 4] = loop {
            let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.1 && n <= 1.0 {
                break q.map(|v| v / n);
            }
        };
        let [w, x, y, z] = q;
        let r = [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ];
        let t = std::array::from_fn(|_| rng.random_range(-50.0..50.0));
        Self { r, t }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        let rp = std::array::from_fn(|i| self.r[i][0] * p[0] + self.r[i][1] * p[1] + self.r[i][2] * p[2]);
        add(rp, self.t)
    }
}

/// Six point-to-plane distances written out with a Hessian normal form, averaged.
pub fn dpp_oracle(a: &[Vec3; 3], b: &[Vec3; 3]) -> f64 {
    fn plane(p: &[Vec3; 3]) -> (Vec3, f64) {
        let u = [p[1][0] - p[0][0], p[1][1] - p[0][1], p[1][2] - p[0][2]];
        let v = [p[2][0] - p[0][0], p[2][1] - p[0][1], p[2][2] - p[0][2]];
        let n = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        let n = [n[0] / len, n[1] / len, n[2] / len];
        (n, -(n[0] * p[0][0] + n[1] * p[0][1] + n[2] * p[0][2]))
    }
    let (na, da) = plane(a);
    let (nb, db) = plane(b);
    let mut s = 0.0;
    for q in b {
        s += (na[0] * q[0] + na[1] * q[1] + na[2] * q[2] + da).abs();
    }
    for q in a {
        s += (nb[0] * q[0] + nb[1] * q[1] + nb[2] * q[2] + db).abs();
    }
    s / 6.0
}

/// Random 16^3 grid with per-axis spacing in {0.5, 1, 2} mm and an in-bounds landmark.
///
/// Each landmark coordinate sits on a voxel, halfway between two, or anywhere, so that
/// mirror-symmetric voxel pairs occur.
pub fn random_heatmap_case(rng: &mut ChaCha8Rng) -> (Grid, LandmarkSet, f64) {
    let choices = [0.5, 1.0, 2.0];
    let spacing: Vec3 = std::array::from_fn(|_| choices[rng.random_range(0..3)]);
    let origin: Vec3 = std::array::from_fn(|_| f64::from(rng.random_range(-20..20)) * 0.5);
    let grid = Grid::new([16; 3], spacing, origin).unwrap();
    let l: Vec3 = std::array::from_fn(|a| {
        let k = f64::from(rng.random_range(1..14));
        let frac = match rng.random_range(0..3) {
            0 => 0.0,
            1 => 0.5,
            _ => rng.random_range(0.0..1.0),
        };
        origin[a] + (k + frac) * spacing[a]
    });
    let sigma = rng.random_range(0.5..4.0);
    (grid, LandmarkSet::from_pairs([("L", l)]).unwrap(), sigma)
}

/// The argmax voxel is a nearest voxel to the landmark (f32 ties allowed between
/// voxels whose distances differ by less than 1e-3 mm).
pub fn check_heatmap_argmax(grid: &Grid, lms: &LandmarkSet, cfg: &HeatmapConfig) -> Result<(), String> {
    let h = generate_heatmap(grid, lms, cfg).map_err(|e| e.to_string())?;
    let l = lms.points[0].position;
    let dist = |i: usize| glip_core::vec3::distance(grid.index_world(grid.unravel(i)), l);
    let nearest = (0..grid.len()).map(dist).fold(f64::INFINITY, f64::min);
    let (best, _) = argmax(h.channel(0));
    let d = dist(best);
    if d - nearest > 1e-3 {
        return Err(format!("argmax voxel at {d:.6} mm, nearest voxel at {nearest:.6} mm"));
    }
    Ok(())
}

/// Every voxel carries the kernel of its world distance to the landmark, and voxels at
/// equal distance carry values within 1e-6. Returns the number of equidistant pairs.
pub fn check_heatmap_isotropy(grid: &Grid, lms: &LandmarkSet, cfg: &HeatmapConfig) -> Result<usize, String> {
    let h = generate_heatmap(grid, lms, cfg).map_err(|e| e.to_string())?;
    let l = lms.points[0].position;
    let mut by_dist: Vec<(f64, f32)> = (0..grid.len())
        .map(|i| (glip_core::vec3::distance(grid.index_world(grid.unravel(i)), l), h.channel(0)[i]))
        .collect();
    for &(d, v) in &by_dist {
        let s2 = 2.0 * cfg.sigma * cfg.sigma;
        let expected = if cfg.squared_distance { (-d * d / s2).exp() } else { (-d / s2).exp() };
        if (v as f64 - expected).abs() > 1e-6 {
            return Err(format!("distance {d} mm: value {v}, kernel {expected}"));
        }
    }
    by_dist.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut pairs = 0;
    for w in by_dist.windows(2) {
        if (w[1].0 - w[0].0).abs() <= 1e-9 * w[0].0.max(1.0) {
            pairs += 1;
            if (w[1].1 - w[0].1).abs() > 1e-6 {
                return Err(format!("distance {} mm: values {} and {}", w[0].0, w[0].1, w[1].1));
            }
        }
    }
    Ok(pairs)
}
