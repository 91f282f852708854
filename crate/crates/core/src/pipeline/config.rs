//! Run and patch configuration, loaded from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};
use crate::loss::{LossKind, LossSpec};
use crate::metrics::DecodeRule;
use crate::net::adam::AdamConfig;
use crate::net::{HeadActivation, NetworkConfig};
use crate::phantom::PhantomConfig;
use crate::volume::HeatmapConfig;

/// Network shape knobs; the rest of [`NetworkConfig`] follows from the data and loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetArch {
    pub depth: usize,
    pub base_channels: usize,
    pub batch_norm: bool,
}

impl Default for NetArch {
    fn default() -> Self {
        Self { depth: 4, base_channels: 16, batch_norm: false }
    }
}

impl NetArch {
    pub fn network_config(&self, loss: &LossSpec, out_channels: usize, input_shape: [usize; 3], seed: u64) -> NetworkConfig {
        NetworkConfig {
            in_channels: 1,
            out_channels,
            depth: self.depth,
            base_channels: self.base_channels,
            head_activation: head_for(loss.kind),
            batch_norm: self.batch_norm,
            input_shape,
            seed,
        }
    }

    fn problems(&self, what: &str, p: &mut Vec<String>) {
        if self.depth == 0 {
            p.push(format!("{what}.depth must be >= 1"));
        }
        if self.base_channels == 0 {
            p.push(format!("{what}.base_channels must be >= 1"));
        }
    }
}

/// Sigmoid for the probabilistic losses, identity otherwise.
pub fn head_for(kind: LossKind) -> HeadActivation {
    if kind.is_probabilistic() {
        HeadActivation::Sigmoid
    } else {
        HeadActivation::Identity
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub loss: LossSpec,
    pub heatmap: HeatmapConfig,
    pub sigma_grid: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub folds: usize,
    /// CV : test proportions.
    pub split_ratio: [usize; 2],
    pub seed: u64,
    pub network: NetArch,
    /// Per-axis mean-pool factor from stored volumes to first-stage input.
    pub downsample: usize,
    /// Optional isotropic spacing (mm) applied before downsampling.
    pub resample_spacing: Option<f64>,
    pub decode: DecodeRule,
    /// Consecutive epochs above half the volume diagonal that count as divergence.
    pub divergence_patience: usize,
    /// Epochs over which the penalty weight ramps up from 0 (0: full weight from the start).
    pub penalty_warmup_epochs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            loss: LossSpec::glip(10.0),
            heatmap: HeatmapConfig::new(1.0),
            sigma_grid: vec![0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0],
            lambda_grid: vec![1.0, 10.0, 100.0],
            adam: AdamConfig::default(),
            epochs: 200,
            batch_size: 4,
            folds: 4,
            split_ratio: [4, 1],
            seed: 0,
            network: NetArch::default(),
            downsample: 4,
            resample_spacing: None,
            decode: DecodeRule::Argmax,
            divergence_patience: 10,
            penalty_warmup_epochs: 0,
        }
    }
}

fn positive_grid(name: &str, g: &[f64], p: &mut Vec<String>) {
    if g.is_empty() {
        p.push(format!("{name} must not be empty"));
    }
    if g.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        p.push(format!("{name} values must be finite and > 0"));
    }
}

impl RunConfig {
    /// Every problem with the configuration, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut p: Vec<String> = self.loss.problems().into_iter().map(|m| format!("loss: {m}")).collect();
        if let Err(e) = self.heatmap.validate() {
            p.push(format!("heatmap: {e}"));
        }
        positive_grid("sigma_grid", &self.sigma_grid, &mut p);
        if self.lambda_grid.is_empty() {
            p.push("lambda_grid must not be empty".into());
        }
        if self.lambda_grid.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            p.push("lambda_grid values must be finite and >= 0".into());
        }
        if self.folds < 2 {
            p.push(format!("folds must be >= 2 (got {})", self.folds));
        }
        if self.epochs == 0 {
            p.push("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            p.push("batch_size must be >= 1".into());
        }
        if self.split_ratio[0] == 0 || self.split_ratio[1] == 0 {
            p.push(format!("split_ratio {:?} must have two positive parts", self.split_ratio));
        }
        if self.downsample == 0 {
            p.push("downsample must be >= 1".into());
        }
        if self.resample_spacing.is_some_and(|s| !(s.is_finite() && s > 0.0)) {
            p.push("resample_spacing must be > 0".into());
        }
        if !(self.adam.learning_rate.is_finite() && self.adam.learning_rate > 0.0) {
            p.push("adam.learning_rate must be > 0".into());
        }
        if self.divergence_patience == 0 {
            p.push("divergence_patience must be >= 1".into());
        }
        self.network.problems("network", &mut p);
        p
    }

    pub fn validate(&self) -> Result<()> {
        into_result(self.problems())
    }

    /// Copy with a different heatmap sigma and, for penalized losses, penalty weight.
    pub fn with_point(&self, sigma: f64, lambda: Option<f64>) -> Self {
        let mut c = self.clone();
        c.heatmap.sigma = sigma;
        if let Some(l) = lambda {
            c.loss.lambda = l;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    /// Patch edge length in voxels.
    pub patch_size: usize,
    /// Crop disturbance in voxels.
    pub disturbance: usize,
    pub disturbance_grid: Vec<usize>,
    pub sigma: f64,
    pub lambda: f64,
    pub sigma_grid: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub network: NetArch,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            patch_size: 32,
            disturbance: 4,
            disturbance_grid: vec![0, 2, 4, 8],
            sigma: 1.0,
            lambda: 1.0,
            sigma_grid: vec![0.5, 1.0, 2.0, 4.0, 8.0, 16.0],
            lambda_grid: vec![0.1, 1.0, 10.0],
            epochs: 100,
            batch_size: 4,
            network: NetArch { depth: 3, base_channels: 16, batch_norm: false },
        }
    }
}

impl PatchConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.patch_size == 0 {
            p.push("patch.patch_size must be >= 1".into());
        }
        if self.patch_size % (1 << self.network.depth.min(16)) != 0 {
            p.push(format!(
                "patch.patch_size {} must be divisible by 2^{} for the local network",
                self.patch_size, self.network.depth
            ));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            p.push("patch.sigma must be > 0".into());
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            p.push("patch.lambda must be > 0".into());
        }
        positive_grid("patch.sigma_grid", &self.sigma_grid, &mut p);
        positive_grid("patch.lambda_grid", &self.lambda_grid, &mut p);
        if self.disturbance_grid.is_empty() {
            p.push("patch.disturbance_grid must not be empty".into());
        }
        if self.epochs == 0 {
            p.push("patch.epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            p.push("patch.batch_size must be >= 1".into());
        }
        self.network.problems("patch.network", &mut p);
        p
    }

    /// Edge length of the region cut before the disturbance crop.
    pub fn region_size(&self) -> usize {
        self.patch_size + 2 * self.disturbance
    }
}

fn into_result(p: Vec<String>) -> Result<()> {
    if p.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(p))
    }
}

/// The on-disk experiment file: `[phantom]`, `[run]` and `[patch]` tables.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub phantom: PhantomConfig,
    pub run: RunConfig,
    pub patch: PatchConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format { path: origin.into(), message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p: Vec<String> = self.phantom.problems().into_iter().map(|m| format!("phantom: {m}")).collect();
        p.extend(self.run.problems());
        p.extend(self.patch.problems());
        p
    }

    pub fn validate(&self) -> Result<()> {
        into_result(self.problems())
    }
}

/// Short stable hash of any serializable value (hex SHA-256 prefix of its JSON form).
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    Ok(hex::encode(&Sha256::digest(&json)[..8]))
}
