//! Gaussian-kernel landmark heatmaps.

use serde::{Deserialize, Serialize};

use super::{Grid, LandmarkSet};
use crate::vec3::distance;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeatmapConfig {
    /// Kernel scale in mm.
    pub sigma: f64,
    /// `exp(-d^2 / (2 sigma^2))` when set; otherwise `exp(-d / (2 sigma^2))`.
    pub squared_distance: bool,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        Self { sigma: 1.0, squared_distance: false }
    }
}

impl HeatmapConfig {
    pub fn new(sigma: f64) -> Self {
        Self { sigma, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("heatmap sigma must be > 0 (got {})", self.sigma)));
        }
        Ok(())
    }

    /// Kernel value at world distance `dist` (mm).
    #[inline]
    pub fn kernel(&self, dist: f64) -> f64 {
        let d = if self.squared_distance { dist * dist } else { dist };
        (-d / (2.0 * self.sigma * self.sigma)).exp()
    }
}

/// Per-landmark heatmaps `(N_l, D1, D2, D3)` on a volume grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub grid: Grid,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Heatmap {
    pub fn new(grid: Grid, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * grid.len() || channels == 0 {
            return Err(Error::ShapeMismatch {
                expected: format!("{channels} x {:?}", grid.shape),
                actual: data.len().to_string(),
            });
        }
        Ok(Self { grid, channels, data })
    }

    pub fn channel(&self, i: usize) -> &[f32] {
        let n = self.grid.len();
        &self.data[i * n..(i + 1) * n]
    }
}

/// Evaluates the landmark kernel at every voxel center, one channel per landmark.
///
/// Distances are measured in world mm. Landmarks outside the grid only trigger a warning.
pub fn generate_heatmap(grid: &Grid, landmarks: &LandmarkSet, cfg: &HeatmapConfig) -> Result<Heatmap> {
    cfg.validate()?;
    grid.validate()?;
    landmarks.validate()?;
    let n = grid.len();
    let mut data = vec![0.0f32; landmarks.len() * n];
    for (i, lm) in landmarks.points.iter().enumerate() {
        if !grid.contains(lm.position) {
            log::warn!("landmark `{}` at {:?} lies outside the volume", lm.name, lm.position);
        }
        let channel = &mut data[i * n..(i + 1) * n];
        let [d1, d2, d3] = grid.shape;
        let mut k = 0;
        for z in 0..d1 {
            for y in 0..d2 {
                for x in 0..d3 {
                    let p = grid.index_world([z, y, x]);
                    channel[k] = cfg.kernel(distance(p, lm.position)) as f32;
                    k += 1;
                }
            }
        }
    }
    Heatmap::new(*grid, landmarks.len(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_grid() -> Grid {
        Grid::new([5, 1, 1], [1.0; 3], [0.0; 3]).unwrap()
    }

    #[test]
    fn value_is_one_on_the_landmark() {
        let lms = LandmarkSet::from_pairs([("A", [2.0, 0.0, 0.0])]).unwrap();
        let h = generate_heatmap(&line_grid(), &lms, &HeatmapConfig::new(1.0)).unwrap();
        assert_eq!(h.data[2], 1.0);
    }

    #[test]
    fn unsquared_and_squared_kernels() {
        let lms = LandmarkSet::from_pairs([("A", [0.0, 0.0, 0.0])]).unwrap();
        let h = generate_heatmap(&line_grid(), &lms, &HeatmapConfig::new(1.0)).unwrap();
        assert!((h.data[2] as f64 - (-1.0f64).exp()).abs() < 1e-7);
        assert!((h.data[2] as f64 - 0.36788).abs() < 1e-5);
        let cfg = HeatmapConfig { sigma: 1.0, squared_distance: true };
        let h = generate_heatmap(&line_grid(), &lms, &cfg).unwrap();
        assert!((h.data[2] as f64 - 0.13534).abs() < 1e-5);
    }

    #[test]
    fn rejects_non_positive_sigma() {
        let lms = LandmarkSet::from_pairs([("A", [0.0; 3])]).unwrap();
        assert!(generate_heatmap(&line_grid(), &lms, &HeatmapConfig::new(0.0)).is_err());
        assert!(generate_heatmap(&line_grid(), &lms, &HeatmapConfig::new(-1.0)).is_err());
    }

    #[test]
    fn outside_landmark_still_produces_a_heatmap() {
        let lms = LandmarkSet::from_pairs([("A", [100.0, 0.0, 0.0])]).unwrap();
        let h = generate_heatmap(&line_grid(), &lms, &HeatmapConfig::new(1.0)).unwrap();
        assert!(h.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn anisotropic_spacing_uses_world_distance() {
        let g = Grid::new([1, 1, 3], [1.0, 1.0, 2.0], [0.0; 3]).unwrap();
        let lms = LandmarkSet::from_pairs([("A", [0.0; 3])]).unwrap();
        let h = generate_heatmap(&g, &lms, &HeatmapConfig::new(1.0)).unwrap();
        assert!((h.data[1] as f64 - (-1.0f64).exp()).abs() < 1e-7);
    }
}
