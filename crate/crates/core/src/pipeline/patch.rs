//! Second-stage refinement on full-resolution patches around the first-stage prediction.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{config_hash, PatchConfig};
use super::cv::{ensemble_predict, mean_heatmaps, CvRun, Dataset, CHECKPOINT_DIR, METRICS_FILE, RESULT_FILE};
use super::data::{standardize, Prepared};
use super::train::{train_network, write_metrics_csv, TrainItem, TrainSettings};
use super::{derive_seed, write_json_atomic};
use crate::error::{io_err, Error, Result};
use crate::loss::LossSpec;
use crate::metrics::report::{default_thresholds, median};
use crate::metrics::{argmax, extract_landmarks, sdr, DecodeRule, EvalReport, SampleEval};
use crate::net::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::net::{Feature, Network};
use crate::vec3::{distance, Vec3};
use crate::volume::{resample_to_spacing, Grid, Heatmap, HeatmapConfig, Landmark, LandmarkSet, Volume};

const LOCAL_NET_STREAM: u64 = 3;
const LOCAL_TRAIN_STREAM: u64 = 4;

pub enum PatchMode<'a> {
    /// Crop offset `u` drawn uniformly from `{1, ..., 2 p^d}` per axis.
    Train(&'a mut ChaCha8Rng),
    /// Centered crop, `u = p^d`.
    Inference,
}

/// Where a patch sits in its source volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchOrigin {
    pub source: Grid,
    /// Source voxel index of patch voxel `[0, 0, 0]`; may be negative near the border.
    pub start: [i64; 3],
    pub size: usize,
    /// Crop offset inside the `(p^s + 2 p^d)^3` region.
    pub offset: [usize; 3],
}

impl PatchOrigin {
    /// World position of patch voxel `j`, computed on the source grid.
    pub fn world(&self, j: [usize; 3]) -> Vec3 {
        self.source.voxel_to_world(std::array::from_fn(|a| (self.start[a] + j[a] as i64) as f64))
    }

    pub fn grid(&self) -> Grid {
        Grid { shape: [self.size; 3], spacing: self.source.spacing, origin: self.world([0; 3]) }
    }
}

/// Cuts the `(p^s + 2 p^d)^3` region around `center` (zero outside the source) and returns
/// its `(p^s)^3` sub-block at offset `u`.
pub fn extract_patch(
    v: &Volume,
    center: Vec3,
    patch_size: usize,
    disturbance: usize,
    mode: PatchMode<'_>,
) -> Result<(Volume, PatchOrigin)> {
    if patch_size == 0 {
        return Err(Error::InvalidArgument("patch size must be >= 1".into()));
    }
    if center.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidArgument(format!("patch center {center:?} is not finite")));
    }
    let region = (patch_size + 2 * disturbance) as i64;
    let c = v.grid.world_to_voxel(center).map(|x| x.round() as i64);
    let offset: [usize; 3] = match mode {
        PatchMode::Train(rng) if disturbance > 0 => std::array::from_fn(|_| rng.random_range(1..=2 * disturbance)),
        _ => [disturbance; 3],
    };
    let start: [i64; 3] = std::array::from_fn(|a| c[a] - region / 2 + offset[a] as i64);
    let origin = PatchOrigin { source: v.grid, start, size: patch_size, offset };
    let mut data = vec![0.0f32; patch_size.pow(3)];
    let shape = v.grid.shape.map(|s| s as i64);
    let mut k = 0;
    for z in 0..patch_size as i64 {
        for y in 0..patch_size as i64 {
            for x in 0..patch_size as i64 {
                let s = [start[0] + z, start[1] + y, start[2] + x];
                if (0..3).all(|a| s[a] >= 0 && s[a] < shape[a]) {
                    data[k] = v.at(s.map(|i| i as usize));
                }
                k += 1;
            }
        }
    }
    Ok((Volume::new(origin.grid(), data)?, origin))
}

/// Heatmap of one landmark over a patch, sampled at the patch's source-grid positions.
pub fn patch_target(origin: &PatchOrigin, landmark: Vec3, cfg: &HeatmapConfig) -> Vec<f64> {
    let n = origin.size;
    let mut out = Vec::with_capacity(n.pow(3));
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                out.push(cfg.kernel(distance(origin.world([z, y, x]), landmark)) as f32 as f64);
            }
        }
    }
    out
}

/// Decodes a single-channel patch heatmap back to world coordinates.
pub fn decode_patch(h: &Heatmap, origin: &PatchOrigin, rule: DecodeRule) -> Result<Vec3> {
    match rule {
        DecodeRule::Argmax => {
            if let Some(index) = h.data.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { index });
            }
            Ok(origin.world(h.grid.unravel(argmax(h.channel(0)).0)))
        }
        DecodeRule::Centroid => Ok(extract_landmarks(h, &["patch".into()], rule)?.landmarks.points[0].position),
    }
}

/// One `(p^d, sigma, lambda)` configuration of the local networks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchPoint {
    pub disturbance: usize,
    pub sigma: f64,
    pub lambda: f64,
}

pub fn patch_grid_points(cfg: &PatchConfig) -> Vec<PatchPoint> {
    let mut out = Vec::new();
    for &disturbance in &cfg.disturbance_grid {
        for &sigma in &cfg.sigma_grid {
            for &lambda in &cfg.lambda_grid {
                out.push(PatchPoint { disturbance, sigma, lambda });
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalResult {
    pub point_hash: String,
    pub fold: usize,
    pub landmark: String,
    pub epochs_run: usize,
    pub diverged: Option<String>,
    pub val_errors_mm: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchSweepResult {
    pub point: PatchPoint,
    pub point_hash: String,
    pub diverged: bool,
    pub cv_median_mm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SecondStageOutcome {
    pub sweep: Vec<PatchSweepResult>,
    pub best: PatchPoint,
    pub thresholds_mm: Vec<f64>,
    pub sdr_first: Vec<f64>,
    pub sdr_second: Vec<f64>,
    /// Second-stage SDR is at least the first-stage SDR at every threshold.
    pub second_not_worse: bool,
}

pub const SECOND_STAGE_DIR: &str = "second_stage";
pub const SECOND_STAGE_REPORT: &str = "report.json";
pub const SECOND_STAGE_SUMMARY: &str = "summary.json";

/// Shared inputs of the second stage: full-resolution volumes and global predictions.
struct Context<'a> {
    run: &'a CvRun,
    data: &'a Dataset,
    patch: &'a PatchConfig,
    names: Vec<String>,
    full: Vec<Volume>,
    /// Per fold (in `run.folds` order): global model and its predictions for every sample.
    globals: Vec<(usize, Network, Vec<LandmarkSet>)>,
}

fn full_resolution(p: &Prepared, resample: Option<f64>) -> Result<Volume> {
    let v = match resample {
        Some(s) => resample_to_spacing(&p.sample.volume, [s; 3])?,
        None => p.sample.volume.clone(),
    };
    Ok(standardize(&v))
}

impl<'a> Context<'a> {
    fn new(run: &'a CvRun, data: &'a Dataset, patch: &'a PatchConfig) -> Result<Self> {
        let full = data
            .items
            .iter()
            .map(|p| full_resolution(p, run.config.resample_spacing))
            .collect::<Result<Vec<_>>>()?;
        let names = data.names();
        let mut globals = Vec::new();
        for f in run.folds.iter().filter(|f| f.diverged.is_none()) {
            let dir = super::cv::fold_dir(&run.dir, f.fold).join(CHECKPOINT_DIR);
            let net = load_checkpoint(&dir)?.0;
            let preds = data
                .items
                .iter()
                .map(|p| Ok(ensemble_predict(std::slice::from_ref(&net), &p.input, p.grid, &names, run.config.decode)?.landmarks))
                .collect::<Result<Vec<_>>>()?;
            globals.push((f.fold, net, preds));
        }
        if globals.is_empty() {
            return Err(Error::Diverged(format!("run {} has no usable first-stage model", run.hash)));
        }
        Ok(Self { run, data, patch, names, full, globals })
    }

    fn position(&self, id: &str) -> usize {
        self.data.items.iter().position(|p| p.id() == id).expect("id comes from the split plan")
    }

    fn loss(&self, lambda: f64) -> LossSpec {
        let mut l = self.run.config.loss.clone();
        if l.penalized() {
            l.lambda = lambda;
        }
        l
    }

    fn local_dir(&self, point_hash: &str, fold: usize, landmark: &str) -> PathBuf {
        self.run.dir.join(SECOND_STAGE_DIR).join(point_hash).join(format!("fold{fold}")).join(landmark)
    }

    /// Trains (or reloads) the local network of one landmark on one fold.
    fn train_local(&self, point: PatchPoint, point_hash: &str, g: usize, li: usize) -> Result<LocalResult> {
        let (fold, _, preds) = &self.globals[g];
        let name = &self.names[li];
        let dir = self.local_dir(point_hash, *fold, name);
        let result_path = dir.join(RESULT_FILE);
        if result_path.exists() {
            let text = fs::read_to_string(&result_path).map_err(io_err(&result_path))?;
            let done: LocalResult = serde_json::from_str(&text)
                .map_err(|e| Error::Format { path: result_path.clone(), message: e.to_string() })?;
            if done.point_hash == point_hash {
                return Ok(done);
            }
        }
        let plan = &self.data.plan;
        let train: Vec<usize> = plan.train_ids(*fold).iter().map(|id| self.position(id)).collect();
        let val: Vec<usize> = plan.folds[*fold].iter().map(|id| self.position(id)).collect();
        let heatmap = HeatmapConfig { sigma: point.sigma, ..self.run.config.heatmap };
        let truth = |i: usize| self.data.items[i].sample.landmarks.points[li].position;
        let ps = self.patch.patch_size;
        let mut sampler = |_: usize, rng: &mut ChaCha8Rng| -> Result<Vec<Arc<TrainItem>>> {
            train
                .iter()
                .map(|&i| {
                    let center = preds[i].points[li].position;
                    let (v, origin) = extract_patch(&self.full[i], center, ps, point.disturbance, PatchMode::Train(rng))?;
                    Ok(Arc::new(TrainItem {
                        input: Feature::from_vec(1, [ps; 3], v.data),
                        target: patch_target(&origin, truth(i), &heatmap),
                    }))
                })
                .collect()
        };
        let decode = self.run.config.decode;
        let val_errors = |net: &Network| -> Result<Vec<f64>> {
            val.iter()
                .map(|&i| {
                    let (v, origin) =
                        extract_patch(&self.full[i], preds[i].points[li].position, ps, point.disturbance, PatchMode::Inference)?;
                    let out = net.predict(&[Feature::from_vec(1, [ps; 3], v.data)])?.remove(0);
                    let h = Heatmap::new(origin.grid(), 1, out.data)?;
                    Ok(distance(decode_patch(&h, &origin, decode)?, truth(i)))
                })
                .collect()
        };
        let mut validate = |net: &Network| Ok(median(&val_errors(net)?));
        let loss = self.loss(point.lambda);
        let net_cfg = self.patch.network.network_config(
            &loss,
            1,
            [ps; 3],
            derive_seed(self.run.config.seed, LOCAL_NET_STREAM, fold * 64 + li),
        );
        let grid = Grid { shape: [ps; 3], ..self.full[0].grid };
        let settings = TrainSettings {
            loss: loss.clone(),
            adam: self.run.config.adam,
            epochs: self.patch.epochs,
            batch_size: self.patch.batch_size,
            seed: derive_seed(self.run.config.seed, LOCAL_TRAIN_STREAM, fold * 64 + li),
            divergence_threshold_mm: 0.5 * grid.extent_diagonal(),
            divergence_patience: self.run.config.divergence_patience,
            penalty_warmup_epochs: self.run.config.penalty_warmup_epochs.min(self.patch.epochs),
        };
        log::info!("local net `{name}` fold {fold}, point {point:?}");
        let trained = train_network(net_cfg, &settings, &mut sampler, &mut validate)?;
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        write_metrics_csv(&dir.join(METRICS_FILE), &trained.history, trained.diverged.is_some())?;
        let val_errors_mm = if trained.diverged.is_none() {
            let meta = CheckpointMeta {
                network_config: trained.network.config().clone(),
                loss_spec: loss,
                heatmap,
                fold_index: Some(*fold),
                epoch: trained.history.len(),
            };
            save_checkpoint(&dir.join(CHECKPOINT_DIR), &trained.network, &meta)?;
            val_errors(&trained.network)?
        } else {
            Vec::new()
        };
        let result = LocalResult {
            point_hash: point_hash.into(),
            fold: *fold,
            landmark: name.clone(),
            epochs_run: trained.history.len(),
            diverged: trained.diverged,
            val_errors_mm,
        };
        write_json_atomic(&result_path, &result)?;
        Ok(result)
    }

    fn point_hash(&self, point: PatchPoint) -> Result<String> {
        config_hash(&(&self.run.hash, self.patch, point))
    }

    fn cv_point(&self, point: PatchPoint) -> Result<PatchSweepResult> {
        let point_hash = self.point_hash(point)?;
        let mut errors = Vec::new();
        let mut diverged = false;
        for g in 0..self.globals.len() {
            for li in 0..self.names.len() {
                let r = self.train_local(point, &point_hash, g, li)?;
                diverged |= r.diverged.is_some();
                errors.extend(r.val_errors_mm);
            }
        }
        let cv_median_mm = if diverged { None } else { median(&errors) };
        log::info!("second stage {point:?}: cv median {cv_median_mm:?} mm");
        Ok(PatchSweepResult { point, point_hash, diverged, cv_median_mm })
    }

    /// Test-set evaluation: stage 1 is the global fold ensemble, stage 2 refines each
    /// landmark with the ensemble of its local networks.
    fn evaluate(&self, best: &PatchSweepResult) -> Result<EvalReport> {
        let globals: Vec<Network> = self.globals.iter().map(|g| g.1.clone()).collect();
        let mut locals: Vec<Vec<Network>> = vec![Vec::new(); self.names.len()];
        for (fold, _, _) in &self.globals {
            for (li, name) in self.names.iter().enumerate() {
                let dir = self.local_dir(&best.point_hash, *fold, name).join(CHECKPOINT_DIR);
                if dir.exists() {
                    locals[li].push(load_checkpoint(&dir)?.0);
                }
            }
        }
        let tag = self.run.config.loss.tag();
        let decode = self.run.config.decode;
        let ps = self.patch.patch_size;
        let mut report = EvalReport::new(default_thresholds());
        for id in &self.data.plan.test {
            let i = self.position(id);
            let p = &self.data.items[i];
            let first = ensemble_predict(&globals, &p.input, p.grid, &self.names, decode)?.landmarks;
            let mut refined = Vec::with_capacity(self.names.len());
            for (li, lm) in first.points.iter().enumerate() {
                let position = if locals[li].is_empty() {
                    lm.position
                } else {
                    let (v, origin) =
                        extract_patch(&self.full[i], lm.position, ps, best.point.disturbance, PatchMode::Inference)?;
                    let input = Feature::from_vec(1, [ps; 3], v.data);
                    let stacks = locals[li]
                        .iter()
                        .map(|n| Heatmap::new(origin.grid(), 1, n.predict(std::slice::from_ref(&input))?.remove(0).data))
                        .collect::<Result<Vec<_>>>()?;
                    decode_patch(&mean_heatmaps(&stacks)?, &origin, decode)?
                };
                refined.push(Landmark { name: lm.name.clone(), position });
            }
            let q = p.sample.meta.quality;
            report.push(SampleEval::new(id, q, &tag, 1, &p.sample.landmarks, &first)?);
            report.push(SampleEval::new(id, q, &tag, 2, &p.sample.landmarks, &LandmarkSet::new(refined)?)?);
        }
        Ok(report)
    }
}

/// Sweeps `points` for the local networks on the CV folds of `run`, picks the best by CV
/// median error (ties: smaller disturbance, sigma, lambda) and compares both stages on the
/// test set. Results go to `<run dir>/second_stage/`.
pub fn second_stage_run(run: &CvRun, data: &Dataset, patch: &PatchConfig, points: &[PatchPoint]) -> Result<SecondStageOutcome> {
    let problems = patch.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    if points.is_empty() {
        return Err(Error::InvalidArgument("no second-stage configurations to run".into()));
    }
    let ctx = Context::new(run, data, patch)?;
    let sweep = points.iter().map(|&p| ctx.cv_point(p)).collect::<Result<Vec<_>>>()?;
    let best = sweep
        .iter()
        .filter_map(|r| r.cv_median_mm.map(|m| (m, r)))
        .min_by(|(ma, a), (mb, b)| {
            ma.total_cmp(mb)
                .then(a.point.disturbance.cmp(&b.point.disturbance))
                .then(a.point.sigma.total_cmp(&b.point.sigma))
                .then(a.point.lambda.total_cmp(&b.point.lambda))
        })
        .map(|(_, r)| r.clone())
        .ok_or_else(|| Error::Diverged("every second-stage configuration diverged".into()))?;
    let report = ctx.evaluate(&best)?;
    let dir = run.dir.join(SECOND_STAGE_DIR);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    report.write_json(&dir.join(SECOND_STAGE_REPORT))?;
    let stage_errors = |stage: u8| -> Vec<f64> {
        report
            .samples
            .iter()
            .filter(|s| s.stage == stage)
            .flat_map(|s| s.landmark_errors.iter().map(|l| l.error_mm))
            .collect()
    };
    let thresholds_mm = report.thresholds_mm.clone();
    let sdr_first = sdr(&stage_errors(1), &thresholds_mm)?;
    let sdr_second = sdr(&stage_errors(2), &thresholds_mm)?;
    let second_not_worse = sdr_second.iter().zip(&sdr_first).all(|(s, f)| s >= f);
    if !second_not_worse {
        log::warn!("second-stage SDR falls below first-stage SDR at some threshold");
    }
    let outcome = SecondStageOutcome { sweep, best: best.point, thresholds_mm, sdr_first, sdr_second, second_not_worse };
    write_json_atomic(&dir.join(SECOND_STAGE_SUMMARY), &outcome)?;
    Ok(outcome)
}

/// Reads a previously written second-stage report.
pub fn read_second_stage_report(run_dir: &Path) -> Result<EvalReport> {
    EvalReport::read_json(&run_dir.join(SECOND_STAGE_DIR).join(SECOND_STAGE_REPORT))
}
