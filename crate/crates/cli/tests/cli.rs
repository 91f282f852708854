use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"
[phantom]
shape = [32, 32, 32]
spacing = [1.0, 1.0, 1.0]
count = 12

[run]
epochs = 1
folds = 2
downsample = 2
sigma_grid = [1.0, 4.0]
lambda_grid = [10.0]

[run.network]
depth = 1
base_channels = 2

[patch]
patch_size = 8
disturbance = 2
epochs = 1

[patch.network]
depth = 1
base_channels = 2
"#;

const LANDMARKS: [&str; 3] = ["RCC", "LCC", "NCC"];

fn glip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glip")).args(args).env("GLIP_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = glip(args);
    assert!(
        out.status.success(),
        "glip {args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("exp.toml");
    fs::write(&p, text).unwrap();
    p
}

fn csv_header(path: &Path) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.headers().unwrap().iter().map(String::from).collect()
}

fn csv_column(path: &Path, name: &str) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let k = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|rec| rec.unwrap()[k].to_string()).collect()
}

/// Text content of every `<text>` element, with its fill colour.
fn svg_texts(path: &Path) -> Vec<(String, String)> {
    let svg = fs::read_to_string(path).unwrap();
    let mut out = Vec::new();
    let mut rest = svg.as_str();
    while let Some(i) = rest.find("<text") {
        rest = &rest[i..];
        let tag_end = rest.find('>').unwrap();
        let tag = &rest[..tag_end];
        let fill = tag.split("fill=\"").nth(1).and_then(|f| f.split('"').next()).unwrap_or("").to_string();
        let close = rest.find("</text>").unwrap();
        out.push((rest[tag_end + 1..close].trim().to_string(), fill));
        rest = &rest[close..];
    }
    out
}

fn only_subdir(dir: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_dir()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.into_iter().next().unwrap()
}

#[test]
fn phantom_generation_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), CONFIG);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let stdout = ok(&["phantom", "--config", s(&cfg), "--out", s(out), "--count", "4"]);
        assert!(stdout.contains("wrote 4 samples"), "{stdout}");
    }
    let manifest = fs::read(a.join("manifest.json")).unwrap();
    assert_eq!(manifest, fs::read(b.join("manifest.json")).unwrap());
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
}

#[test]
fn missing_config_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = glip(&["phantom", "--config", s(&tmp.path().join("nope.toml")), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.toml"));
}

#[test]
fn config_problems_are_listed_together() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = CONFIG.replace("epochs = 1\nfolds = 2", "epochs = 0\nfolds = 2\nbatch_size = 0");
    let cfg = write_config(tmp.path(), &bad);
    let data = tmp.path().join("data");
    ok(&["phantom", "--config", s(&cfg), "--out", s(&data), "--count", "4"]);
    let out = glip(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&tmp.path().join("runs"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("epochs") && err.contains("batch_size"), "{err}");
}

#[test]
fn unknown_loss_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), CONFIG);
    let out = glip(&["train", "--config", s(&cfg), "--data", "x", "--out", "y", "--loss", "hinge"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn default_config_round_trips_through_a_file() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ok(&["default-config"]);
    let cfg = write_config(tmp.path(), &text);
    let stdout = ok(&["phantom", "--config", s(&cfg), "--out", s(&tmp.path().join("d")), "--count", "1"]);
    assert!(stdout.contains("wrote 1 samples"));
}

#[test]
fn train_sweep_eval_and_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = write_config(root, CONFIG);
    let data = root.join("data");
    ok(&["phantom", "--config", s(&cfg), "--out", s(&data)]);

    let common = |out: &Path| vec!["--config".to_string(), s(&cfg).into(), "--data".into(), s(&data).into(), "--out".into(), s(out).into()];
    let run = |sub: &str, out: &Path, extra: &[&str]| -> String {
        let mut args = vec![sub.to_string()];
        args.extend(common(out));
        args.extend(extra.iter().map(|a| a.to_string()));
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>())
    };

    let glip_runs = root.join("runs_glip");
    let stdout = run("train", &glip_runs, &[]);
    assert!(stdout.contains("fold 0") && stdout.contains("fold 1") && stdout.contains("test median"), "{stdout}");
    let glip_dir = only_subdir(&glip_runs);
    let report_csv = glip_dir.join("report.csv");
    assert_eq!(csv_header(&report_csv)[0], "schema_version");
    assert_eq!(csv_column(&report_csv, "landmark").len() % 3, 0);

    // resuming an identical configuration reuses the finished folds
    let again = run("train", &glip_runs, &[]);
    assert_eq!(only_subdir(&glip_runs), glip_dir);
    assert!(again.contains("test median"));

    let mse_runs = root.join("runs_mse");
    run("train", &mse_runs, &["--loss", "mse", "--sigma", "4"]);
    let mse_dir = only_subdir(&mse_runs);

    let ev = root.join("ev");
    let reports = [glip_dir.join("report.json"), mse_dir.join("report.json")];
    let stdout = ok(&["eval", "--report", s(&reports[0]), "--report", s(&reports[1]), "--out", s(&ev)]);
    assert!(stdout.contains("all"), "{stdout}");
    let grouped = ev.join("eval_quality.csv");
    assert_eq!(csv_header(&grouped)[..3], ["schema_version", "group_by", "group"]);
    assert!(csv_column(&grouped, "group").contains(&"all".to_string()));
    assert!(csv_column(&grouped, "schema_version").iter().all(|v| v == "1"));
    let losses: BTreeSet<String> = csv_column(&ev.join("eval_samples.csv"), "loss").into_iter().collect();
    assert_eq!(losses.len(), 2, "{losses:?}");

    let fig = root.join("fig");
    let plot = |kind: &str| ok(&["plot", "--report", s(&reports[0]), "--report", s(&reports[1]), "--kind", kind, "--out", s(&fig)]);
    plot("box");
    let labels: Vec<String> = svg_texts(&fig.join("box.svg")).into_iter().map(|t| t.0).collect();
    for loss in &losses {
        for lm in LANDMARKS {
            assert!(labels.contains(&format!("{loss} {lm}")), "{loss} {lm} missing from {labels:?}");
        }
    }
    plot("sdr");
    let labels: Vec<String> = svg_texts(&fig.join("sdr.svg")).into_iter().map(|t| t.0).collect();
    for loss in &losses {
        assert_eq!(labels.iter().filter(|l| *l == loss).count(), 1, "legend for {loss}: {labels:?}");
    }
    let stdout = plot("plane");
    let plane = PathBuf::from(stdout.trim().strip_prefix("wrote ").unwrap());
    let red: Vec<f64> =
        svg_texts(&plane).into_iter().filter(|t| t.1 == "#FF0000").map(|t| t.0.parse().unwrap()).collect();
    // three projected distances per side; a collinear prediction drops the second side
    assert!(red.len() == 6 || red.len() == 3, "{red:?}");
    assert!(red.iter().all(|d| *d >= 0.0));

    let sweeps = root.join("sweeps");
    run("sweep", &sweeps, &["--axis", "sigma"]);
    let sens = sweeps.join("sensitivity_sigma.csv");
    assert_eq!(csv_header(&sens)[0], "schema_version");
    assert_eq!(csv_column(&sens, "schema_version").len(), 2);

    let stdout = run("second-stage", &glip_runs, &[]);
    assert!(stdout.contains("sdr_stage1"), "{stdout}");
    let ss = glip_dir.join("second_stage").join("report.csv");
    let stages: BTreeSet<String> = csv_column(&ss, "stage").into_iter().collect();
    assert_eq!(stages, BTreeSet::from(["1".to_string(), "2".to_string()]));
}
