//! Experimental protocol: splits, cross-validated training, sweeps, ensembling and
//! second-stage patch refinement.

pub mod config;
pub mod cv;
pub mod data;
pub mod patch;
pub mod train;

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{io_err, Result};

pub use config::{config_hash, ExperimentConfig, NetArch, PatchConfig, RunConfig};
pub use cv::{ensemble_heatmap, ensemble_predict, run_cv, select_hyperparams, sensitivity_sweep, CvRun, Dataset, SweepAxis};
pub use data::{split_cv_test, SplitPlan};
pub use patch::{extract_patch, second_stage_run, PatchMode, PatchOrigin};

/// Writes JSON next to its destination and renames it into place.
pub(crate) fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(value)?).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Decorrelated seed for a named sub-task of a run.
pub(crate) fn derive_seed(base: u64, stream: u64, index: usize) -> u64 {
    crate::phantom::sample_seed(base ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93), index)
}
