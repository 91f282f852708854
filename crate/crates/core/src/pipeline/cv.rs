//! Cross-validated training, fold ensembling, test evaluation and hyperparameter sweeps.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{config_hash, RunConfig};
use super::data::{split_cv_test, target_batch, Prepared, SplitPlan};
use super::train::{train_network, write_metrics_csv, TrainItem, TrainSettings};
use super::{derive_seed, write_json_atomic};
use crate::error::{io_err, Error, Result};
use crate::loss::LossKind;
use crate::metrics::report::{default_thresholds, median, Summary};
use crate::metrics::{extract_landmarks, DecodeRule, EvalReport, Extraction, SampleEval};
use crate::net::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::net::{Feature, Network};
use crate::volume::{Grid, Heatmap, Sample};

pub const RESULT_FILE: &str = "result.json";
pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const RUN_CONFIG_FILE: &str = "config.json";
pub const SPLIT_FILE: &str = "split.json";

const NET_SEED_STREAM: u64 = 1;
const TRAIN_SEED_STREAM: u64 = 2;

/// First-stage inputs for every sample plus the split they are used under.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub items: Vec<Prepared>,
    pub plan: SplitPlan,
    index: HashMap<String, usize>,
    fingerprint: String,
}

#[derive(Serialize)]
struct Fingerprint<'a> {
    ids: Vec<(&'a str, u64)>,
    downsample: usize,
    resample_spacing: Option<f64>,
    plan: &'a SplitPlan,
}

impl Dataset {
    /// Preprocesses `samples` for the first stage and splits them with the run's seed.
    pub fn first_stage(samples: &[Sample], cfg: &RunConfig) -> Result<Self> {
        let items = samples.iter().map(|s| Prepared::first_stage(s, cfg)).collect::<Result<Vec<_>>>()?;
        Self::from_prepared(items, cfg)
    }

    pub fn from_prepared(items: Vec<Prepared>, cfg: &RunConfig) -> Result<Self> {
        let ids: Vec<String> = items.iter().map(|p| p.id().to_string()).collect();
        let plan = split_cv_test(&ids, cfg.split_ratio, cfg.folds, cfg.seed)?;
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate sample id `{id}`")));
            }
        }
        let first = &items[0];
        for p in &items {
            if p.grid.shape != first.grid.shape || p.names() != first.names() {
                return Err(Error::Sample {
                    sample_id: p.id().into(),
                    source: Box::new(Error::ShapeMismatch {
                        expected: format!("{:?} with landmarks {:?}", first.grid.shape, first.names()),
                        actual: format!("{:?} with landmarks {:?}", p.grid.shape, p.names()),
                    }),
                });
            }
        }
        let fingerprint = config_hash(&Fingerprint {
            ids: items.iter().map(|p| (p.id(), p.sample.meta.rng_seed)).collect(),
            downsample: cfg.downsample,
            resample_spacing: cfg.resample_spacing,
            plan: &plan,
        })?;
        Ok(Self { items, plan, index, fingerprint })
    }

    pub fn get(&self, id: &str) -> Result<&Prepared> {
        self.index
            .get(id)
            .map(|&i| &self.items[i])
            .ok_or_else(|| Error::InvalidArgument(format!("unknown sample `{id}`")))
    }

    pub fn select<'a, S: AsRef<str>>(&'a self, ids: &[S]) -> Result<Vec<&'a Prepared>> {
        ids.iter().map(|id| self.get(id.as_ref())).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.items[0].names()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.items[0].grid.shape
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }
}

/// Stable identity of a run: its configuration plus the data it sees.
pub fn run_hash(cfg: &RunConfig, data: &Dataset) -> Result<String> {
    config_hash(&(cfg, &data.fingerprint))
}

/// Outcome of one fold, persisted as `fold<k>/result.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub run_hash: String,
    pub epochs_run: usize,
    pub diverged: Option<String>,
    /// Validation errors (mm) of the final network, sample-major in landmark order.
    pub val_errors_mm: Vec<f64>,
    pub val_median_mm: Option<f64>,
}

/// Stage-1 evaluation of `items` with an ensemble of networks.
pub fn evaluate_items(
    nets: &[Network],
    items: &[&Prepared],
    decode: DecodeRule,
    loss_tag: &str,
) -> Result<Vec<SampleEval>> {
    items
        .iter()
        .map(|p| {
            let e = ensemble_predict(nets, &p.input, p.grid, &p.names(), decode)?;
            SampleEval::new(p.id(), p.sample.meta.quality, loss_tag, 1, &p.sample.landmarks, &e.landmarks)
        })
        .collect()
}

fn flat_errors(evals: &[SampleEval]) -> Vec<f64> {
    evals.iter().flat_map(|e| e.landmark_errors.iter().map(|l| l.error_mm)).collect()
}

pub fn fold_dir(run_dir: &Path, fold: usize) -> PathBuf {
    run_dir.join(format!("fold{fold}"))
}

fn read_result(path: &Path) -> Result<FoldResult> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Format { path: path.into(), message: e.to_string() })
}

/// Trains on every CV fold except `fold` and validates on `fold`.
///
/// A fold whose `result.json` already carries the same run hash is not retrained.
pub fn train_fold(cfg: &RunConfig, data: &Dataset, fold: usize, dir: &Path) -> Result<FoldResult> {
    let hash = run_hash(cfg, data)?;
    let result_path = dir.join(RESULT_FILE);
    if result_path.exists() {
        let done = read_result(&result_path)?;
        if done.run_hash == hash && done.fold == fold {
            log::info!("fold {fold} of run {hash} already complete");
            return Ok(done);
        }
    }
    if fold >= data.plan.folds.len() {
        return Err(Error::InvalidArgument(format!("fold {fold} out of range ({} folds)", data.plan.folds.len())));
    }
    let train = data.select(&data.plan.train_ids(fold))?;
    let val = data.select(&data.plan.folds[fold])?;
    let items = train
        .iter()
        .map(|p| Ok(Arc::new(TrainItem { input: p.input.clone(), target: target_batch(&[p], &cfg.heatmap)?.values })))
        .collect::<Result<Vec<_>>>()?;
    let net_cfg = cfg.network.network_config(
        &cfg.loss,
        data.names().len(),
        data.input_shape(),
        derive_seed(cfg.seed, NET_SEED_STREAM, fold),
    );
    let settings = TrainSettings {
        loss: cfg.loss.clone(),
        adam: cfg.adam,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed: derive_seed(cfg.seed, TRAIN_SEED_STREAM, fold),
        divergence_threshold_mm: 0.5 * data.items[0].grid.extent_diagonal(),
        divergence_patience: cfg.divergence_patience,
        penalty_warmup_epochs: cfg.penalty_warmup_epochs,
    };
    let tag = cfg.loss.tag();
    let mut validate = |net: &Network| -> Result<Option<f64>> {
        let evals = evaluate_items(std::slice::from_ref(net), &val, cfg.decode, &tag)?;
        Ok(median(&flat_errors(&evals)))
    };
    log::info!("run {hash} fold {fold}: {} train / {} val samples", train.len(), val.len());
    let trained = train_network(net_cfg, &settings, &mut |_, _| Ok(items.clone()), &mut validate)?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_metrics_csv(&dir.join(METRICS_FILE), &trained.history, trained.diverged.is_some())?;
    let val_errors_mm = if trained.diverged.is_none() {
        let meta = CheckpointMeta {
            network_config: trained.network.config().clone(),
            loss_spec: cfg.loss.clone(),
            heatmap: cfg.heatmap,
            fold_index: Some(fold),
            epoch: trained.history.len(),
        };
        save_checkpoint(&dir.join(CHECKPOINT_DIR), &trained.network, &meta)?;
        flat_errors(&evaluate_items(std::slice::from_ref(&trained.network), &val, cfg.decode, &tag)?)
    } else {
        Vec::new()
    };
    let result = FoldResult {
        fold,
        run_hash: hash,
        epochs_run: trained.history.len(),
        diverged: trained.diverged,
        val_median_mm: median(&val_errors_mm),
        val_errors_mm,
    };
    write_json_atomic(&result_path, &result)?;
    Ok(result)
}

/// The folds of one configuration, as far as they have been run.
#[derive(Clone, Debug)]
pub struct CvRun {
    pub hash: String,
    pub dir: PathBuf,
    pub config: RunConfig,
    pub folds: Vec<FoldResult>,
}

impl CvRun {
    pub fn diverged(&self) -> bool {
        self.folds.iter().any(|f| f.diverged.is_some())
    }

    /// Median over the pooled validation errors of all folds; `None` if any fold diverged.
    pub fn cv_median_mm(&self) -> Option<f64> {
        if self.diverged() {
            return None;
        }
        median(&self.folds.iter().flat_map(|f| f.val_errors_mm.iter().copied()).collect::<Vec<_>>())
    }

    /// Loads the checkpoints of all completed, non-diverged folds.
    pub fn networks(&self) -> Result<Vec<Network>> {
        self.folds
            .iter()
            .filter(|f| f.diverged.is_none())
            .map(|f| Ok(load_checkpoint(&fold_dir(&self.dir, f.fold).join(CHECKPOINT_DIR))?.0))
            .collect()
    }
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start {jobs} workers: {e}")))
}

/// Runs (or resumes) the CV folds of one configuration under `runs_root/<hash>/`.
///
/// `folds` restricts the run to a subset; `None` runs all of them. Folds are independent
/// jobs, spread over `jobs` worker threads.
pub fn run_cv(cfg: &RunConfig, data: &Dataset, runs_root: &Path, folds: Option<&[usize]>, jobs: usize) -> Result<CvRun> {
    cfg.validate()?;
    let hash = run_hash(cfg, data)?;
    let dir = runs_root.join(&hash);
    write_json_atomic(&dir.join(RUN_CONFIG_FILE), cfg)?;
    write_json_atomic(&dir.join(SPLIT_FILE), &data.plan)?;
    let selected: Vec<usize> = match folds {
        Some(f) => f.to_vec(),
        None => (0..cfg.folds).collect(),
    };
    let results = thread_pool(jobs)?.install(|| {
        selected.par_iter().map(|&k| train_fold(cfg, data, k, &fold_dir(&dir, k))).collect::<Vec<_>>()
    });
    let folds = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(CvRun { hash, dir, config: cfg.clone(), folds })
}

/// Per-voxel mean of the networks' heatmap stacks, accumulated in f64.
pub fn ensemble_heatmap(nets: &[Network], input: &Feature, grid: Grid) -> Result<Heatmap> {
    let first = nets.first().ok_or_else(|| Error::InvalidArgument("ensemble needs at least one network".into()))?;
    for n in nets {
        let (a, b) = (n.config(), first.config());
        if a.out_channels != b.out_channels || a.input_shape != b.input_shape || a.in_channels != b.in_channels {
            return Err(Error::ShapeMismatch {
                expected: format!("{} channels on {:?}", b.out_channels, b.input_shape),
                actual: format!("{} channels on {:?}", a.out_channels, a.input_shape),
            });
        }
    }
    let stacks = nets
        .iter()
        .map(|n| Heatmap::new(grid, n.config().out_channels, n.predict(std::slice::from_ref(input))?.remove(0).data))
        .collect::<Result<Vec<_>>>()?;
    mean_heatmaps(&stacks)
}

/// Per-voxel mean of equally shaped heatmap stacks, accumulated in f64.
pub fn mean_heatmaps(stacks: &[Heatmap]) -> Result<Heatmap> {
    let first = stacks.first().ok_or_else(|| Error::InvalidArgument("nothing to average".into()))?;
    let mut acc = vec![0.0f64; first.data.len()];
    for h in stacks {
        if h.grid != first.grid || h.channels != first.channels {
            return Err(Error::ShapeMismatch {
                expected: format!("{} x {:?}", first.channels, first.grid.shape),
                actual: format!("{} x {:?}", h.channels, h.grid.shape),
            });
        }
        for (a, &v) in acc.iter_mut().zip(&h.data) {
            *a += v as f64;
        }
    }
    let k = stacks.len() as f64;
    Heatmap::new(first.grid, first.channels, acc.iter().map(|&a| (a / k) as f32).collect())
}

/// Averages the heatmaps of all networks, then decodes landmarks from the mean.
pub fn ensemble_predict(
    nets: &[Network],
    input: &Feature,
    grid: Grid,
    names: &[String],
    decode: DecodeRule,
) -> Result<Extraction> {
    extract_landmarks(&ensemble_heatmap(nets, input, grid)?, names, decode)
}

/// Ensembles all completed folds over the test set and writes `report.json` in the run dir.
pub fn evaluate_test(run: &CvRun, data: &Dataset) -> Result<EvalReport> {
    let nets = run.networks()?;
    if nets.is_empty() {
        return Err(Error::Diverged(format!("run {} has no usable fold model", run.hash)));
    }
    let test = data.select(&data.plan.test)?;
    let mut report = EvalReport::new(default_thresholds());
    for e in evaluate_items(&nets, &test, run.config.decode, &run.config.loss.tag())? {
        report.push(e);
    }
    report.write_json(&run.dir.join(REPORT_FILE))?;
    Ok(report)
}

/// One configuration of a hyperparameter sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub sigma: f64,
    pub lambda: Option<f64>,
    pub run_hash: String,
    pub diverged: bool,
    pub cv_median_mm: Option<f64>,
}

/// Every `(sigma, lambda)` pair of the run's grids; lambda only for penalized losses.
pub fn grid_points(cfg: &RunConfig) -> Vec<(f64, Option<f64>)> {
    let lambdas: Vec<Option<f64>> =
        if cfg.loss.penalized() { cfg.lambda_grid.iter().map(|&l| Some(l)).collect() } else { vec![None] };
    cfg.sigma_grid.iter().flat_map(|&s| lambdas.iter().map(move |&l| (s, l))).collect()
}

/// Copy of `cfg` at a sweep point. A zero penalty weight on GLiP is the OT-only ablation.
pub fn at_point(cfg: &RunConfig, sigma: f64, lambda: Option<f64>) -> RunConfig {
    let mut c = cfg.with_point(sigma, lambda);
    if c.loss.kind == LossKind::Glip && c.loss.lambda == 0.0 {
        c.loss.kind = LossKind::OtOnly;
    }
    c
}

pub fn sweep(
    cfg: &RunConfig,
    data: &Dataset,
    runs_root: &Path,
    points: &[(f64, Option<f64>)],
    folds: Option<&[usize]>,
    jobs: usize,
) -> Result<Vec<(SweepPoint, CvRun)>> {
    points
        .iter()
        .map(|&(sigma, lambda)| {
            let run = run_cv(&at_point(cfg, sigma, lambda), data, runs_root, folds, jobs)?;
            let point = SweepPoint {
                sigma,
                lambda,
                run_hash: run.hash.clone(),
                diverged: run.diverged(),
                cv_median_mm: run.cv_median_mm(),
            };
            log::info!("sigma {sigma} lambda {lambda:?}: cv median {:?} mm", point.cv_median_mm);
            Ok((point, run))
        })
        .collect()
}

/// The point with the lowest CV median error; ties go to smaller sigma, then smaller lambda.
pub fn select_hyperparams(points: &[SweepPoint]) -> Result<&SweepPoint> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("no sweep results to select from".into()));
    }
    points
        .iter()
        .filter_map(|p| p.cv_median_mm.filter(|_| !p.diverged).map(|m| (m, p)))
        .min_by(|(ma, a), (mb, b)| {
            ma.total_cmp(mb)
                .then(a.sigma.total_cmp(&b.sigma))
                .then(a.lambda.unwrap_or(0.0).total_cmp(&b.lambda.unwrap_or(0.0)))
        })
        .map(|(_, p)| p)
        .ok_or_else(|| Error::Diverged(format!("all {} configurations diverged", points.len())))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Sigma,
    Lambda,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigma" => Ok(Self::Sigma),
            "lambda" => Ok(Self::Lambda),
            other => Err(Error::InvalidArgument(format!("unknown sweep axis `{other}` (sigma | lambda)"))),
        }
    }
}

/// Penalty weight held fixed while sweeping sigma.
pub const SENSITIVITY_LAMBDA: f64 = 10.0;
/// Heatmap sigma held fixed while sweeping lambda.
pub const SENSITIVITY_SIGMA: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub run_hash: String,
    pub diverged: bool,
    pub cv_median_mm: Option<f64>,
    /// Test landmark-error quantiles of the fold ensemble.
    pub test_error_mm: Option<Summary>,
    pub test_dpp_mm: Option<Summary>,
}

/// One row per grid value of `axis`, with the other parameter fixed.
///
/// The lambda axis also includes 0, the unpenalized ablation.
pub fn sensitivity_sweep(
    template: &RunConfig,
    axis: SweepAxis,
    data: &Dataset,
    runs_root: &Path,
    folds: Option<&[usize]>,
    jobs: usize,
) -> Result<Vec<SensitivityRow>> {
    let points: Vec<(f64, (f64, Option<f64>))> = match axis {
        SweepAxis::Sigma => template.sigma_grid.iter().map(|&s| (s, (s, Some(SENSITIVITY_LAMBDA)))).collect(),
        SweepAxis::Lambda => std::iter::once(0.0)
            .chain(template.lambda_grid.iter().copied().filter(|&l| l != 0.0))
            .map(|l| (l, (SENSITIVITY_SIGMA, Some(l))))
            .collect(),
    };
    let mut rows = Vec::with_capacity(points.len());
    for (value, (sigma, lambda)) in points {
        let lambda = lambda.filter(|_| template.loss.penalized() || template.loss.kind == LossKind::Glip);
        let cfg = at_point(template, sigma, lambda);
        let run = run_cv(&cfg, data, runs_root, folds, jobs)?;
        let (test_error_mm, test_dpp_mm) = if run.folds.iter().any(|f| f.diverged.is_none()) {
            let report = evaluate_test(&run, data)?;
            let overall = report.overall()?;
            (Some(overall.landmark_error), overall.dpp_mm)
        } else {
            (None, None)
        };
        rows.push(SensitivityRow {
            axis,
            value,
            run_hash: run.hash.clone(),
            diverged: run.diverged(),
            cv_median_mm: run.cv_median_mm(),
            test_error_mm,
            test_dpp_mm,
        });
    }
    Ok(rows)
}
