//! Synthetic aortic-root phantoms: a curved tube ending in a ring, with three hinge
//! markers on the ring at roughly 120 degree spacing.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::volume::io::save_sample;
use crate::vec3::{add, cross, dot, normalize, scale, sub, Vec3};
use crate::volume::{Grid, LandmarkSet, Quality, Sample, SampleMeta, Volume, HINGE_NAMES};

/// Maps degradation levels up to `max_level` (inclusive) to `grade`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityThreshold {
    pub max_level: f64,
    pub grade: Quality,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub shape: [usize; 3],
    pub spacing: Vec3,
    pub tube_radius_range: [f64; 2],
    pub annulus_radius_range: [f64; 2],
    pub marker_intensity: f64,
    pub noise_sigma: f64,
    pub blur_sigma_range: [f64; 2],
    /// Ascending in `max_level`; the last entry must cover level 1.
    pub quality_thresholds: Vec<QualityThreshold>,
    pub count: usize,
    pub base_seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        let t = |max_level, grade| QualityThreshold { max_level, grade };
        Self {
            shape: [64, 64, 64],
            spacing: [0.5; 3],
            tube_radius_range: [1.5, 2.5],
            annulus_radius_range: [5.0, 7.0],
            marker_intensity: 1.0,
            noise_sigma: 0.05,
            blur_sigma_range: [0.0, 0.75],
            quality_thresholds: vec![
                t(0.2, Quality::Excellent),
                t(0.4, Quality::Good),
                t(0.6, Quality::Fair),
                t(0.8, Quality::Poor),
                t(1.0, Quality::VeryPoor),
            ],
            count: 167,
            base_seed: 0,
        }
    }
}

const RING_HALF_WIDTH: f64 = 1.0;
const RING_INTENSITY: f64 = 0.3;
const TUBE_INTENSITY: f64 = 0.3;
const MARKER_WIDTH: f64 = 0.8;
/// Marker amplitude per hinge, relative to `marker_intensity`; distinct so the three
/// cusps are distinguishable.
const MARKER_WEIGHTS: [f64; 3] = [1.0, 0.75, 0.5];
const RETRY_CAP: usize = 64;

fn range_ok(r: [f64; 2], allow_zero: bool) -> bool {
    let lo_ok = if allow_zero { r[0] >= 0.0 } else { r[0] > 0.0 };
    r.iter().all(|v| v.is_finite()) && lo_ok && r[0] <= r[1]
}

impl PhantomConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if let Err(e) = Grid::new(self.shape, self.spacing, [0.0; 3]) {
            p.push(e.to_string());
        }
        if !range_ok(self.tube_radius_range, false) {
            p.push(format!("tube_radius_range {:?} must be positive and ordered", self.tube_radius_range));
        }
        if !range_ok(self.annulus_radius_range, false) {
            p.push(format!("annulus_radius_range {:?} must be positive and ordered", self.annulus_radius_range));
        }
        if !range_ok(self.blur_sigma_range, true) {
            p.push(format!("blur_sigma_range {:?} must be non-negative and ordered", self.blur_sigma_range));
        }
        if !(self.marker_intensity.is_finite() && self.marker_intensity > 0.0) {
            p.push(format!("marker_intensity must be > 0 (got {})", self.marker_intensity));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            p.push(format!("noise_sigma must be >= 0 (got {})", self.noise_sigma));
        }
        if self.count == 0 {
            p.push("count must be >= 1".into());
        }
        if self.tube_radius_range[1] + RING_HALF_WIDTH >= self.annulus_radius_range[0] {
            p.push("tube must be narrower than the annulus".into());
        }
        let th = &self.quality_thresholds;
        if th.is_empty() {
            p.push("quality_thresholds must not be empty".into());
        } else {
            if th.windows(2).any(|w| w[1].max_level <= w[0].max_level) {
                p.push("quality_thresholds must be strictly ascending in max_level".into());
            }
            if th.windows(2).any(|w| w[1].grade > w[0].grade) {
                p.push("a higher degradation level must not map to a better quality grade".into());
            }
            if th.last().is_some_and(|t| t.max_level < 1.0) {
                p.push("the last quality threshold must cover degradation level 1".into());
            }
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    pub fn grade(&self, level: f64) -> Quality {
        self.quality_thresholds
            .iter()
            .find(|t| level <= t.max_level)
            .or(self.quality_thresholds.last())
            .map(|t| t.grade)
            .unwrap_or(Quality::VeryPoor)
    }
}

/// Per-sample seed derived from the base seed and sample index (SplitMix64 finalizer).
pub fn sample_seed(base_seed: u64, index: usize) -> u64 {
    let mut z = base_seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sample_id(index: usize) -> String {
    format!("phantom_{index:05}")
}

/// Geometry of one phantom before rasterization.
#[derive(Clone, Debug)]
struct Layout {
    center: Vec3,
    normal: Vec3,
    u: Vec3,
    v: Vec3,
    annulus_radius: f64,
    tube_radius: f64,
    tube_length: f64,
    bend: f64,
    hinges: [Vec3; 3],
}

impl Layout {
    fn sample(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Self {
        let extent: Vec3 = std::array::from_fn(|a| (cfg.shape[a] - 1) as f64 * cfg.spacing[a]);
        let center: Vec3 = std::array::from_fn(|a| extent[a] * (0.5 + rng.random_range(-0.1..0.1)));
        let normal: Vec3 = UnitSphere.sample(rng);
        let helper = if normal[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        let u = normalize(cross(normal, helper));
        let v = cross(normal, u);
        let annulus_radius = rng.random_range(cfg.annulus_radius_range[0]..=cfg.annulus_radius_range[1]);
        let tube_radius = rng.random_range(cfg.tube_radius_range[0]..=cfg.tube_radius_range[1]);
        let theta0 = rng.random_range(0.0..TAU);
        let hinges = std::array::from_fn(|i| {
            let jitter = rng.random_range(-10f64..10.0).to_radians();
            let th = theta0 + i as f64 * TAU / 3.0 + jitter;
            add(center, add(scale(u, annulus_radius * th.cos()), scale(v, annulus_radius * th.sin())))
        });
        let max_extent = extent.iter().cloned().fold(0.0, f64::max);
        Self {
            center,
            normal,
            u,
            v,
            annulus_radius,
            tube_radius,
            tube_length: 0.6 * max_extent,
            bend: rng.random_range(0.0..0.5) * annulus_radius,
            hinges,
        }
    }

    /// Ring and markers stay at least `margin` mm inside the volume.
    fn fits(&self, extent: Vec3, margin: f64) -> bool {
        let inside = |p: Vec3| (0..3).all(|a| p[a] >= margin && p[a] <= extent[a] - margin);
        (0..72).all(|k| {
            let th = k as f64 * TAU / 72.0;
            inside(add(self.center, add(scale(self.u, self.annulus_radius * th.cos()), scale(self.v, self.annulus_radius * th.sin()))))
        }) && self.hinges.iter().all(|&h| inside(h))
    }

    /// Distance from `p` to the tube centerline `c + L t n + b t^2 u`, t in [0, 1].
    fn tube_distance(&self, p: Vec3) -> f64 {
        let mut best = f64::INFINITY;
        let steps = 48;
        for k in 0..=steps {
            let t = k as f64 / steps as f64;
            let c = add(self.center, add(scale(self.normal, self.tube_length * t), scale(self.u, self.bend * t * t)));
            let d = sub(p, c);
            best = best.min(dot(d, d));
        }
        best.sqrt()
    }

    fn ring_distance(&self, p: Vec3) -> f64 {
        let d = sub(p, self.center);
        let h = dot(d, self.normal);
        let in_plane = sub(d, scale(self.normal, h));
        let r = dot(in_plane, in_plane).sqrt();
        ((r - self.annulus_radius).powi(2) + h * h).sqrt()
    }
}

fn gaussian_kernel(sigma_vox: f64) -> Vec<f64> {
    let radius = (3.0 * sigma_vox).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma_vox * sigma_vox)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with clamped edges; `sigma` in mm.
fn blur(data: &mut [f64], shape: [usize; 3], spacing: Vec3, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let strides = [shape[1] * shape[2], shape[2], 1];
    let mut line = Vec::new();
    for axis in 0..3 {
        let kernel = gaussian_kernel(sigma / spacing[axis]);
        let radius = (kernel.len() / 2) as isize;
        let n = shape[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for i in 0..shape[others[0]] {
            for j in 0..shape[others[1]] {
                let base = i * strides[others[0]] + j * strides[others[1]];
                line.clear();
                line.extend((0..n).map(|k| data[base + k * strides[axis]]));
                for k in 0..n {
                    let mut acc = 0.0;
                    for (t, w) in kernel.iter().enumerate() {
                        let src = (k as isize + t as isize - radius).clamp(0, n as isize - 1) as usize;
                        acc += w * line[src];
                    }
                    data[base + k * strides[axis]] = acc;
                }
            }
        }
    }
}

/// Generates phantom `index`; fully determined by `(cfg.base_seed, index)`.
pub fn generate_phantom(cfg: &PhantomConfig, index: usize) -> Result<Sample> {
    cfg.validate()?;
    if index >= cfg.count {
        return Err(Error::InvalidArgument(format!("phantom index {index} outside [0, {})", cfg.count)));
    }
    let seed = sample_seed(cfg.base_seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = Grid::new(cfg.shape, cfg.spacing, [0.0; 3])?;
    let extent: Vec3 = std::array::from_fn(|a| (cfg.shape[a] - 1) as f64 * cfg.spacing[a]);
    let margin = RING_HALF_WIDTH + 2.0 * cfg.spacing.iter().cloned().fold(0.0, f64::max);
    let layout = (0..RETRY_CAP)
        .map(|_| Layout::sample(cfg, &mut rng))
        .find(|l| l.fits(extent, margin))
        .ok_or_else(|| {
            Error::InvalidGeometry(format!("annulus does not fit in the volume after {RETRY_CAP} attempts"))
        })?;
    let level: f64 = rng.random_range(0.0..=1.0);
    let blur_sigma = cfg.blur_sigma_range[0] + level * (cfg.blur_sigma_range[1] - cfg.blur_sigma_range[0]);
    let noise_sigma = cfg.noise_sigma * (0.5 + level);

    let mut data = vec![0.0f64; grid.len()];
    for (k, v) in data.iter_mut().enumerate() {
        let p = grid.index_world(grid.unravel(k));
        let mut val = 0.0;
        if layout.tube_distance(p) <= layout.tube_radius {
            val += TUBE_INTENSITY;
        }
        if layout.ring_distance(p) <= RING_HALF_WIDTH {
            val += RING_INTENSITY;
        }
        for (h, w) in layout.hinges.iter().zip(MARKER_WEIGHTS) {
            let d = sub(p, *h);
            val += cfg.marker_intensity * w * (-dot(d, d) / (2.0 * MARKER_WIDTH * MARKER_WIDTH)).exp();
        }
        *v = val;
    }
    blur(&mut data, cfg.shape, cfg.spacing, blur_sigma);
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for v in data.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    let volume = Volume::new(grid, data.into_iter().map(|v| v as f32).collect())?;
    let landmarks = LandmarkSet::from_pairs(HINGE_NAMES.iter().copied().zip(layout.hinges))?;
    let meta = SampleMeta { sample_id: sample_id(index), quality: cfg.grade(level), split: None, rng_seed: seed };
    Ok(Sample { volume, landmarks, meta })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub quality: Quality,
    pub rng_seed: u64,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `cfg.count` samples plus `manifest.json` into `out_dir`.
pub fn generate_dataset(cfg: &PhantomConfig, out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut manifest = Vec::with_capacity(cfg.count);
    for index in 0..cfg.count {
        let wrap = |e: Error| Error::Sample { sample_id: sample_id(index), source: Box::new(e) };
        let sample = generate_phantom(cfg, index).map_err(wrap)?;
        save_sample(out_dir, &sample).map_err(wrap)?;
        manifest.push(ManifestEntry {
            sample_id: sample.meta.sample_id,
            quality: sample.meta.quality,
            rng_seed: sample.meta.rng_seed,
        });
        log::debug!("generated phantom {}/{}", index + 1, cfg.count);
    }
    write_manifest(out_dir, &manifest)?;
    Ok(manifest)
}

pub fn write_manifest(dir: &Path, manifest: &[ManifestEntry]) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(manifest)?).map_err(io_err(&path))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| Error::Format { path, message: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomConfig {
        PhantomConfig { shape: [24, 24, 24], spacing: [1.0; 3], count: 4, ..Default::default() }
    }

    #[test]
    fn same_seed_and_index_is_bit_identical() {
        let a = generate_phantom(&small(), 2).unwrap();
        let b = generate_phantom(&small(), 2).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(&small(), 3).unwrap();
        assert_ne!(a.volume.data, c.volume.data);
    }

    #[test]
    fn clean_phantom_peaks_at_landmarks() {
        let cfg = PhantomConfig { noise_sigma: 0.0, blur_sigma_range: [0.0, 0.0], ..small() };
        for index in 0..cfg.count {
            let s = generate_phantom(&cfg, index).unwrap();
            let g = s.volume.grid;
            for lm in &s.landmarks.points {
                let nearest = g.nearest_voxel(lm.position);
                // brute-force scan of a neighbourhood around the landmark
                let mut best = (f32::NEG_INFINITY, [0usize; 3]);
                for k in 0..g.len() {
                    let idx = g.unravel(k);
                    let p = g.index_world(idx);
                    let d2: f64 = (0..3).map(|a| (p[a] - lm.position[a]).powi(2)).sum();
                    if d2 <= 2.5f64.powi(2) && s.volume.data[k] > best.0 {
                        best = (s.volume.data[k], idx);
                    }
                }
                assert_eq!(best.1, nearest, "sample {index} landmark {}", lm.name);
            }
        }
    }

    #[test]
    fn landmarks_are_separated() {
        let cfg = small();
        for index in 0..cfg.count {
            let s = generate_phantom(&cfg, index).unwrap();
            let p = s.landmarks.positions();
            for i in 0..3 {
                for j in i + 1..3 {
                    let d: f64 = (0..3).map(|a| (p[i][a] - p[j][a]).powi(2)).sum::<f64>().sqrt();
                    assert!(d >= 2.0 * cfg.spacing[0]);
                }
            }
        }
    }

    #[test]
    fn quality_grade_is_monotone_in_degradation() {
        let cfg = PhantomConfig::default();
        let grades: Vec<Quality> = (0..=100).map(|i| cfg.grade(i as f64 / 100.0)).collect();
        assert!(grades.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(grades[0], Quality::Excellent);
        assert_eq!(grades[100], Quality::VeryPoor);
    }

    #[test]
    fn invalid_configs_list_every_problem() {
        let cfg = PhantomConfig { count: 0, noise_sigma: -1.0, tube_radius_range: [3.0, 1.0], ..small() };
        match cfg.validate() {
            Err(Error::Config(p)) => assert_eq!(p.len(), 3, "{p:?}"),
            other => panic!("unexpected {other:?}"),
        }
        let bad_grades = PhantomConfig {
            quality_thresholds: vec![
                QualityThreshold { max_level: 0.5, grade: Quality::Poor },
                QualityThreshold { max_level: 1.0, grade: Quality::Excellent },
            ],
            ..small()
        };
        assert!(bad_grades.validate().is_err());
    }

    #[test]
    fn annulus_too_large_errors_after_retries() {
        let cfg = PhantomConfig { annulus_radius_range: [30.0, 31.0], ..small() };
        assert!(matches!(generate_phantom(&cfg, 0), Err(Error::InvalidGeometry(_))));
    }

    #[test]
    fn index_out_of_range_is_rejected() {
        assert!(generate_phantom(&small(), 4).is_err());
    }

    #[test]
    fn dataset_and_manifest_are_reproducible() {
        let cfg = PhantomConfig { count: 2, ..small() };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_dataset(&cfg, a.path()).unwrap();
        let mb = generate_dataset(&cfg, b.path()).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(read_manifest(a.path()).unwrap(), ma);
        assert_eq!(
            fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
            fs::read(b.path().join(MANIFEST_FILE)).unwrap()
        );
        let raw = |d: &Path| fs::read(d.join("phantom_00001.raw")).unwrap();
        assert_eq!(raw(a.path()), raw(b.path()));
    }
}
