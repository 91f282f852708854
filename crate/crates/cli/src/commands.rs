use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context};
use glip_core::metrics::report::Aggregate;
use glip_core::metrics::{EvalReport, GroupKey};
use glip_core::phantom::generate_dataset;
use glip_core::pipeline::cv::{evaluate_test, grid_points, sweep as grid_sweep, SweepPoint};
use glip_core::pipeline::data::load_dataset;
use glip_core::pipeline::patch::{patch_grid_points, PatchPoint, SECOND_STAGE_DIR};
use glip_core::pipeline::{run_cv, second_stage_run, select_hyperparams, sensitivity_sweep, CvRun, Dataset, SweepAxis};
use glip_core::{ExperimentConfig, RunConfig};
use serde::Serialize;

use crate::{Axis, CliError, CliResult, Overrides, TrainArgs};

pub const CSV_SCHEMA_VERSION: u32 = 1;

fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("config file {} does not exist", path.display())));
    }
    ExperimentConfig::load(path).map_err(|e| CliError::Usage(e.to_string()))
}

impl Overrides {
    fn apply(&self, c: &mut ExperimentConfig) {
        let run = &mut c.run;
        macro_rules! set {
            ($flag:ident => $($field:tt)+) => {
                if let Some(v) = self.$flag {
                    $($field)+ = v;
                }
            };
        }
        set!(loss => run.loss.kind);
        set!(sigma => run.heatmap.sigma);
        set!(lambda => run.loss.lambda);
        set!(add_grid_penalty => run.loss.add_grid_penalty);
        set!(one_sided_penalty => run.loss.one_sided_penalty);
        set!(squared_distance => run.heatmap.squared_distance);
        set!(epochs => run.epochs);
        set!(batch_size => run.batch_size);
        set!(folds => run.folds);
        set!(seed => run.seed);
        set!(learning_rate => run.adam.learning_rate);
        set!(downsample => run.downsample);
        set!(depth => run.network.depth);
        set!(base_channels => run.network.base_channels);
        set!(batch_norm => run.network.batch_norm);
        set!(decode => run.decode);
        set!(divergence_patience => run.divergence_patience);
        if let Some(s) = self.resample_spacing {
            run.resample_spacing = Some(s);
        }
        let patch = &mut c.patch;
        set!(patch_size => patch.patch_size);
        set!(patch_disturbance => patch.disturbance);
        set!(patch_sigma => patch.sigma);
        set!(patch_lambda => patch.lambda);
        set!(patch_epochs => patch.epochs);
        set!(patch_batch_size => patch.batch_size);
    }
}

/// Config file plus overrides, with every problem reported before any work starts.
fn experiment(args: &TrainArgs) -> CliResult<ExperimentConfig> {
    let mut cfg = load_config(&args.config)?;
    args.overrides.apply(&mut cfg);
    let mut problems: Vec<String> = cfg.run.problems();
    problems.extend(cfg.patch.problems());
    if args.jobs == 0 {
        problems.push("--jobs must be >= 1".into());
    }
    if let Some(f) = &args.only_folds {
        if f.is_empty() {
            problems.push("--only-folds must name at least one fold".into());
        }
        for &k in f.iter().filter(|&&k| k >= cfg.run.folds) {
            problems.push(format!("--only-folds: fold {k} out of range for {} folds", cfg.run.folds));
        }
    }
    if !problems.is_empty() {
        return Err(glip_core::Error::Config(problems).into());
    }
    Ok(cfg)
}

fn dataset(dir: &Path, run: &RunConfig) -> CliResult<Dataset> {
    let samples = load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    if samples.is_empty() {
        return Err(anyhow!("dataset {} has no samples", dir.display()).into());
    }
    log::info!("loaded {} samples from {}", samples.len(), dir.display());
    Ok(Dataset::first_stage(&samples, run)?)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn fmt_mm(v: Option<f64>) -> String {
    v.map(|m| format!("{m:.3}")).unwrap_or_else(|| "-".into())
}

pub fn phantom(config: &Path, out: &Path, count: Option<usize>) -> CliResult {
    let mut cfg = load_config(config)?.phantom;
    if let Some(n) = count {
        cfg.count = n;
    }
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(glip_core::Error::Config(problems).into());
    }
    let manifest = generate_dataset(&cfg, out)?;
    println!("wrote {} samples to {}", manifest.len(), out.display());
    Ok(())
}

fn print_folds(run: &CvRun) {
    println!("run {} ({})", run.hash, run.dir.display());
    for f in &run.folds {
        match &f.diverged {
            Some(reason) => println!("  fold {}: diverged after {} epochs: {reason}", f.fold, f.epochs_run),
            None => println!("  fold {}: val median {} mm", f.fold, fmt_mm(f.val_median_mm)),
        }
    }
    println!("  cv median {} mm", fmt_mm(run.cv_median_mm()));
}

pub fn train(args: &TrainArgs) -> CliResult {
    let cfg = experiment(args)?;
    let data = dataset(&args.data, &cfg.run)?;
    let run = run_cv(&cfg.run, &data, &args.out, args.only_folds.as_deref(), args.jobs)?;
    print_folds(&run);
    if run.folds.iter().all(|f| f.diverged.is_some()) {
        return Err(anyhow!("every fold of run {} diverged", run.hash).into());
    }
    let report = evaluate_test(&run, &data)?;
    report.write_csv(&run.dir.join("report.csv"))?;
    println!("  test median {} mm over {} samples", fmt_mm(report.median_error()), report.samples.len());
    Ok(())
}

#[derive(Serialize)]
struct GridRow<'a> {
    schema_version: u32,
    sigma: f64,
    lambda: Option<f64>,
    run_hash: &'a str,
    diverged: bool,
    cv_median_mm: Option<f64>,
    selected: bool,
}

#[derive(Serialize)]
struct SensitivityCsvRow<'a> {
    schema_version: u32,
    axis: &'a str,
    value: f64,
    run_hash: &'a str,
    diverged: bool,
    cv_median_mm: Option<f64>,
    test_median_mm: Option<f64>,
    test_q25_mm: Option<f64>,
    test_q75_mm: Option<f64>,
    test_dpp_median_mm: Option<f64>,
}

pub fn sweep(args: &TrainArgs, axis: Axis) -> CliResult {
    let cfg = experiment(args)?;
    let data = dataset(&args.data, &cfg.run)?;
    fs::create_dir_all(&args.out).map_err(|e| anyhow!("creating {}: {e}", args.out.display()))?;
    let folds = args.only_folds.as_deref();
    match axis {
        Axis::Grid => {
            let points: Vec<SweepPoint> = grid_sweep(&cfg.run, &data, &args.out, &grid_points(&cfg.run), folds, args.jobs)?
                .into_iter()
                .map(|(p, _)| p)
                .collect();
            let selected = select_hyperparams(&points).ok().cloned();
            let rows: Vec<GridRow> = points
                .iter()
                .map(|p| GridRow {
                    schema_version: CSV_SCHEMA_VERSION,
                    sigma: p.sigma,
                    lambda: p.lambda,
                    run_hash: &p.run_hash,
                    diverged: p.diverged,
                    cv_median_mm: p.cv_median_mm,
                    selected: selected.as_ref().is_some_and(|s| s.run_hash == p.run_hash),
                })
                .collect();
            write_csv(&args.out.join("sweep_grid.csv"), &rows)?;
            write_json(&args.out.join("sweep_grid.json"), &serde_json::json!({ "points": points, "selected": selected }))?;
            for r in &rows {
                println!(
                    "sigma {:>6} lambda {:>6}  cv median {} mm{}",
                    r.sigma,
                    r.lambda.map(|l| l.to_string()).unwrap_or_else(|| "-".into()),
                    fmt_mm(r.cv_median_mm),
                    if r.selected { "  <- selected" } else { "" }
                );
            }
            if selected.is_none() {
                return Err(anyhow!("every configuration diverged").into());
            }
        }
        Axis::Sigma | Axis::Lambda => {
            let (axis, name) = if matches!(axis, Axis::Sigma) { (SweepAxis::Sigma, "sigma") } else { (SweepAxis::Lambda, "lambda") };
            let rows = sensitivity_sweep(&cfg.run, axis, &data, &args.out, folds, args.jobs)?;
            let csv_rows: Vec<SensitivityCsvRow> = rows
                .iter()
                .map(|r| SensitivityCsvRow {
                    schema_version: CSV_SCHEMA_VERSION,
                    axis: name,
                    value: r.value,
                    run_hash: &r.run_hash,
                    diverged: r.diverged,
                    cv_median_mm: r.cv_median_mm,
                    test_median_mm: r.test_error_mm.as_ref().map(|s| s.median),
                    test_q25_mm: r.test_error_mm.as_ref().map(|s| s.q25),
                    test_q75_mm: r.test_error_mm.as_ref().map(|s| s.q75),
                    test_dpp_median_mm: r.test_dpp_mm.as_ref().map(|s| s.median),
                })
                .collect();
            write_csv(&args.out.join(format!("sensitivity_{name}.csv")), &csv_rows)?;
            write_json(&args.out.join(format!("sensitivity_{name}.json")), &rows)?;
            for r in &csv_rows {
                println!(
                    "{name} {:>6}  cv median {} mm  test median {} mm{}",
                    r.value,
                    fmt_mm(r.cv_median_mm),
                    fmt_mm(r.test_median_mm),
                    if r.diverged { "  (diverged)" } else { "" }
                );
            }
        }
    }
    Ok(())
}

pub fn second_stage(args: &TrainArgs, grid: bool) -> CliResult {
    let cfg = experiment(args)?;
    let data = dataset(&args.data, &cfg.run)?;
    let run = run_cv(&cfg.run, &data, &args.out, args.only_folds.as_deref(), args.jobs)?;
    print_folds(&run);
    let points = if grid {
        patch_grid_points(&cfg.patch)
    } else {
        vec![PatchPoint { disturbance: cfg.patch.disturbance, sigma: cfg.patch.sigma, lambda: cfg.patch.lambda }]
    };
    let outcome = second_stage_run(&run, &data, &cfg.patch, &points)?;
    let dir = run.dir.join(SECOND_STAGE_DIR);
    glip_core::pipeline::patch::read_second_stage_report(&run.dir)?.write_csv(&dir.join("report.csv"))?;
    println!(
        "selected patch point: disturbance {} sigma {} lambda {}",
        outcome.best.disturbance, outcome.best.sigma, outcome.best.lambda
    );
    println!("threshold_mm  sdr_stage1  sdr_stage2");
    for ((t, a), b) in outcome.thresholds_mm.iter().zip(&outcome.sdr_first).zip(&outcome.sdr_second) {
        println!("{t:>12.2}  {a:>10.3}  {b:>10.3}");
    }
    if !outcome.second_not_worse {
        println!("WARN: second-stage SDR is below first-stage SDR at some threshold");
    }
    println!("reports in {}", dir.display());
    Ok(())
}

/// Concatenates the samples of several reports; thresholds must agree.
pub fn merge_reports(paths: &[std::path::PathBuf]) -> anyhow::Result<EvalReport> {
    let mut merged: Option<EvalReport> = None;
    for p in paths {
        let r = EvalReport::read_json(p)?;
        match &mut merged {
            None => merged = Some(r),
            Some(m) => {
                if m.thresholds_mm != r.thresholds_mm {
                    bail!("{}: SDR thresholds differ from the first report", p.display());
                }
                m.samples.extend(r.samples);
            }
        }
    }
    let merged = merged.ok_or_else(|| anyhow!("no reports given"))?;
    if merged.is_empty() {
        bail!("the reports contain no samples");
    }
    Ok(merged)
}

#[derive(Serialize)]
struct AggregateRow<'a> {
    schema_version: u32,
    group_by: &'a str,
    group: &'a str,
    samples: usize,
    landmarks: usize,
    q25_mm: f64,
    median_mm: f64,
    q75_mm: f64,
    worst_mm: f64,
    mean_mm: f64,
    dpp_median_mm: Option<f64>,
    angle_median_deg: Option<f64>,
}

fn aggregate_row<'a>(group_by: &'a str, group: &'a str, a: &Aggregate) -> AggregateRow<'a> {
    let e = &a.landmark_error;
    AggregateRow {
        schema_version: CSV_SCHEMA_VERSION,
        group_by,
        group,
        samples: a.samples,
        landmarks: e.count,
        q25_mm: e.q25,
        median_mm: e.median,
        q75_mm: e.q75,
        worst_mm: e.worst,
        mean_mm: e.mean,
        dpp_median_mm: a.dpp_mm.as_ref().map(|s| s.median),
        angle_median_deg: a.angle_deg.as_ref().map(|s| s.median),
    }
}

pub fn eval(reports: &[std::path::PathBuf], key: GroupKey, out: &Path) -> CliResult {
    let merged = merge_reports(reports)?;
    fs::create_dir_all(out).map_err(|e| anyhow!("creating {}: {e}", out.display()))?;
    let key_name = match key {
        GroupKey::Quality => "quality",
        GroupKey::Loss => "loss",
        GroupKey::Stage => "stage",
    };
    let groups = merged.grouped(key)?;
    let overall = merged.overall()?;
    let mut rows: Vec<AggregateRow> = groups.iter().map(|g| aggregate_row(key_name, &g.key, &g.aggregate)).collect();
    rows.push(aggregate_row(key_name, "all", &overall));
    write_csv(&out.join(format!("eval_{key_name}.csv")), &rows)?;
    merged.write_json(&out.join("eval.json"))?;
    merged.write_csv(&out.join("eval_samples.csv"))?;
    println!(
        "{:<12} {:>7} {:>9} {:>9} {:>9} {:>9} {:>9}",
        key_name, "samples", "q25_mm", "median", "q75_mm", "worst", "dPP_med"
    );
    for r in &rows {
        println!(
            "{:<12} {:>7} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>9}",
            r.group,
            r.samples,
            r.q25_mm,
            r.median_mm,
            r.q75_mm,
            r.worst_mm,
            fmt_mm(r.dpp_median_mm)
        );
    }
    Ok(())
}
