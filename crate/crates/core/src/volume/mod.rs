//! Volumes, landmark sets and sample metadata.
//!
//! Coordinates are node-centered: voxel index `k` sits at world position
//! `origin + k * spacing` (millimetres, per axis). Voxel data is stored with the first
//! axis slowest and the third axis fastest.

pub mod heatmap;
pub mod io;
pub mod resample;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use heatmap::{generate_heatmap, Heatmap, HeatmapConfig};
pub use resample::{downsample, resample_to_spacing};

pub use crate::vec3::Vec3;

/// Voxel-grid geometry: shape, spacing and origin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub shape: [usize; 3],
    pub spacing: Vec3,
    pub origin: Vec3,
}

impl Grid {
    pub fn new(shape: [usize; 3], spacing: Vec3, origin: Vec3) -> Result<Self> {
        let g = Self { shape, spacing, origin };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.contains(&0) {
            return Err(Error::InvalidGeometry(format!("shape {:?} has an empty axis", self.shape)));
        }
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidGeometry(format!("spacing {:?} must be finite and > 0", self.spacing)));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGeometry(format!("origin {:?} must be finite", self.origin)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// World position (mm) of a possibly fractional voxel index.
    pub fn voxel_to_world(&self, index: Vec3) -> Vec3 {
        std::array::from_fn(|a| self.origin[a] + index[a] * self.spacing[a])
    }

    /// Fractional voxel index of a world position; out-of-bounds values are returned as-is.
    pub fn world_to_voxel(&self, point: Vec3) -> Vec3 {
        std::array::from_fn(|a| (point[a] - self.origin[a]) / self.spacing[a])
    }

    pub fn linear_index(&self, idx: [usize; 3]) -> usize {
        (idx[0] * self.shape[1] + idx[1]) * self.shape[2] + idx[2]
    }

    pub fn unravel(&self, linear: usize) -> [usize; 3] {
        let plane = self.shape[1] * self.shape[2];
        [linear / plane, (linear / self.shape[2]) % self.shape[1], linear % self.shape[2]]
    }

    pub fn index_world(&self, idx: [usize; 3]) -> Vec3 {
        self.voxel_to_world(idx.map(|i| i as f64))
    }

    /// Whether `point` lies within the hull of voxel centers.
    pub fn contains(&self, point: Vec3) -> bool {
        let v = self.world_to_voxel(point);
        (0..3).all(|a| v[a] >= 0.0 && v[a] <= (self.shape[a] - 1) as f64)
    }

    /// Nearest voxel center to `point`, clamped into the grid.
    pub fn nearest_voxel(&self, point: Vec3) -> [usize; 3] {
        let v = self.world_to_voxel(point);
        std::array::from_fn(|a| v[a].round().clamp(0.0, (self.shape[a] - 1) as f64) as usize)
    }

    /// Distance in mm between the first and last voxel centers.
    pub fn extent_diagonal(&self) -> f64 {
        (0..3).map(|a| ((self.shape[a] - 1) as f64 * self.spacing[a]).powi(2)).sum::<f64>().sqrt()
    }

    /// Length of one voxel diagonal in mm.
    pub fn voxel_diagonal(&self) -> f64 {
        self.spacing.iter().map(|s| s * s).sum::<f64>().sqrt()
    }
}

/// A 3D scalar intensity grid with physical geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub grid: Grid,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f32>) -> Result<Self> {
        grid.validate()?;
        if data.len() != grid.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} voxels for shape {:?}", grid.len(), grid.shape),
                actual: data.len().to_string(),
            });
        }
        Ok(Self { grid, data })
    }

    pub fn zeros(grid: Grid) -> Result<Self> {
        let n = grid.len();
        Self::new(grid, vec![0.0; n])
    }

    pub fn shape(&self) -> [usize; 3] {
        self.grid.shape
    }

    pub fn spacing(&self) -> Vec3 {
        self.grid.spacing
    }

    pub fn origin(&self) -> Vec3 {
        self.grid.origin
    }

    pub fn at(&self, idx: [usize; 3]) -> f32 {
        self.data[self.grid.linear_index(idx)]
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { index }),
            None => Ok(()),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub name: String,
    pub position: Vec3,
}

/// Named world-coordinate landmarks, in channel order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub points: Vec<Landmark>,
}

/// Hinge points of the right-, left- and non-coronary cusps.
pub const HINGE_NAMES: [&str; 3] = ["RCC", "LCC", "NCC"];

impl LandmarkSet {
    pub fn new(points: Vec<Landmark>) -> Result<Self> {
        let s = Self { points };
        s.validate()?;
        Ok(s)
    }

    pub fn from_pairs<S: Into<String>>(pairs: impl IntoIterator<Item = (S, Vec3)>) -> Result<Self> {
        Self::new(pairs.into_iter().map(|(name, position)| Landmark { name: name.into(), position }).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::InvalidArgument("landmark set is empty".into()));
        }
        for (i, p) in self.points.iter().enumerate() {
            if self.points[..i].iter().any(|q| q.name == p.name) {
                return Err(Error::InvalidArgument(format!("duplicate landmark name `{}`", p.name)));
            }
            if p.position.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidArgument(format!("landmark `{}` has a non-finite position", p.name)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.points.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn get(&self, name: &str) -> Option<Vec3> {
        self.points.iter().find(|p| p.name == name).map(|p| p.position)
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.points.iter().map(|p| p.position).collect()
    }
}

/// Image-quality grade, worst (`1`) to best (`4`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Quality {
    #[serde(rename = "1")]
    VeryPoor,
    #[serde(rename = "2")]
    Poor,
    #[serde(rename = "3-")]
    Fair,
    #[serde(rename = "3+")]
    Good,
    #[serde(rename = "4")]
    Excellent,
}

impl Quality {
    pub const ALL: [Quality; 5] = [Quality::VeryPoor, Quality::Poor, Quality::Fair, Quality::Good, Quality::Excellent];

    pub fn as_str(self) -> &'static str {
        match self {
            Quality::VeryPoor => "1",
            Quality::Poor => "2",
            Quality::Fair => "3-",
            Quality::Good => "3+",
            Quality::Excellent => "4",
        }
    }
}

impl std::str::FromStr for Quality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Quality::ALL
            .into_iter()
            .find(|q| q.as_str() == s.trim())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown quality grade `{s}`")))
    }
}

impl std::fmt::Display for Quality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    CvFold(usize),
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::CvFold(k) => write!(f, "cv-fold-{k}"),
            Split::Test => f.write_str("test"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "test" {
            return Ok(Split::Test);
        }
        s.strip_prefix("cv-fold-")
            .and_then(|k| k.parse().ok())
            .map(Split::CvFold)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split `{s}`")))
    }
}

impl Serialize for Split {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Split {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub sample_id: String,
    pub quality: Quality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    pub rng_seed: u64,
}

/// A volume with its ground truth and metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub volume: Volume,
    pub landmarks: LandmarkSet,
    pub meta: SampleMeta,
}
