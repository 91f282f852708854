//! Dataset loading, first-stage preprocessing and the CV/test split.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::loss::BatchTensor;
use crate::net::Feature;
use crate::phantom::read_manifest;
use crate::volume::io::load_sample;
use crate::volume::{downsample, generate_heatmap, resample_to_spacing, Grid, HeatmapConfig, Sample, Volume};

/// Loads every sample listed in `<dir>/manifest.json`, in manifest order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let manifest = read_manifest(dir)?;
    manifest
        .iter()
        .map(|m| {
            load_sample(dir, &m.sample_id)
                .map_err(|e| Error::Sample { sample_id: m.sample_id.clone(), source: Box::new(e) })
        })
        .collect()
}

/// Zero-mean, unit-variance copy of the intensities (unchanged if constant).
pub fn standardize(v: &Volume) -> Volume {
    let n = v.data.len() as f64;
    let mean = v.data.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.data.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
    Volume { grid: v.grid, data: v.data.iter().map(|&x| ((x as f64 - mean) * inv) as f32).collect() }
}

/// First-stage input volume: optional resampling, mean-pool downsampling, standardization.
pub fn first_stage_volume(v: &Volume, cfg: &RunConfig) -> Result<Volume> {
    let resampled = match cfg.resample_spacing {
        Some(s) => resample_to_spacing(v, [s; 3])?,
        None => v.clone(),
    };
    let small = downsample(&resampled, [cfg.downsample; 3])?;
    Ok(standardize(&small))
}

/// A network-ready sample: input, truth and metadata.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub sample: Sample,
    pub input: Feature,
    pub grid: Grid,
}

impl Prepared {
    pub fn first_stage(sample: &Sample, cfg: &RunConfig) -> Result<Self> {
        let v = first_stage_volume(&sample.volume, cfg)
            .map_err(|e| Error::Sample { sample_id: sample.meta.sample_id.clone(), source: Box::new(e) })?;
        Ok(Self::from_volume(sample.clone(), v))
    }

    pub fn from_volume(sample: Sample, v: Volume) -> Self {
        let input = Feature::from_vec(1, v.grid.shape, v.data);
        Self { sample, input, grid: v.grid }
    }

    pub fn id(&self) -> &str {
        &self.sample.meta.sample_id
    }

    pub fn names(&self) -> Vec<String> {
        self.sample.landmarks.names().into_iter().map(String::from).collect()
    }
}

/// Stacks per-sample heatmaps into a `(B, N_l, D1, D2, D3)` target tensor.
pub fn target_batch(samples: &[&Prepared], heatmap: &HeatmapConfig) -> Result<BatchTensor> {
    let first = samples.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let nl = first.sample.landmarks.len();
    let dims = first.grid.shape;
    let mut values = Vec::with_capacity(samples.len() * nl * first.grid.len());
    for s in samples {
        let h = generate_heatmap(&s.grid, &s.sample.landmarks, heatmap)?;
        if h.channels != nl || s.grid.shape != dims {
            return Err(Error::ShapeMismatch {
                expected: format!("{nl} x {dims:?}"),
                actual: format!("{} x {:?}", h.channels, s.grid.shape),
            });
        }
        values.extend(h.data.iter().map(|&v| v as f64));
    }
    BatchTensor::new([samples.len(), nl, dims[0], dims[1], dims[2]], values)
}

/// Disjoint test set and CV folds, by sample id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub test: Vec<String>,
    pub folds: Vec<Vec<String>>,
}

impl SplitPlan {
    pub fn cv(&self) -> impl Iterator<Item = &String> {
        self.folds.iter().flatten()
    }

    /// Training ids for fold `k`: every CV id outside fold `k`.
    pub fn train_ids(&self, k: usize) -> Vec<&String> {
        self.folds.iter().enumerate().filter(|(i, _)| *i != k).flat_map(|(_, f)| f).collect()
    }
}

/// Shuffles `ids` deterministically, holds out `ratio[1] / (ratio[0] + ratio[1])` as the
/// test set (rounded to nearest) and deals the rest round-robin into `folds` folds.
pub fn split_cv_test(ids: &[String], ratio: [usize; 2], folds: usize, seed: u64) -> Result<SplitPlan> {
    if folds < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds (got {folds})")));
    }
    if ratio[0] == 0 || ratio[1] == 0 {
        return Err(Error::InvalidArgument(format!("split ratio {ratio:?} must be positive")));
    }
    let n = ids.len();
    let n_test = ((n * ratio[1]) as f64 / (ratio[0] + ratio[1]) as f64).round() as usize;
    if n_test == 0 || n - n_test < folds {
        return Err(Error::InvalidArgument(format!("{n} samples are too few for a {folds}-fold split plus a test set")));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = shuffled[..n_test].to_vec();
    let mut fold_ids = vec![Vec::new(); folds];
    for (i, id) in shuffled[n_test..].iter().enumerate() {
        fold_ids[i % folds].push(id.clone());
    }
    Ok(SplitPlan { test, folds: fold_ids })
}
