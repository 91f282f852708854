//! Per-sample evaluation rows, quantile summaries and CSV/JSON serialization.
//!
//! CSV schema (version 1), one row per sample and landmark:
//! `schema_version,sample_id,quality,loss,stage,landmark,error_mm,dpp_mm,angle_deg`.
//! `dpp_mm` and `angle_deg` repeat on each landmark row of a sample and are empty when
//! either triple is collinear. The JSON report holds the same samples plus aggregates.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{avg_projection_distance, euclid_errors, plane_angle, plane_from_points, sdr};
use crate::error::{io_err, Error, Result};
use crate::volume::{LandmarkSet, Quality};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkError {
    pub name: String,
    pub error_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub sample_id: String,
    pub quality: Quality,
    /// Loss tag, e.g. `GLiP` or `MSE`.
    pub loss: String,
    pub stage: u8,
    pub landmark_errors: Vec<LandmarkError>,
    pub dpp_mm: Option<f64>,
    pub angle_deg: Option<f64>,
    pub truth: LandmarkSet,
    pub predicted: LandmarkSet,
}

impl SampleEval {
    pub fn new(
        sample_id: &str,
        quality: Quality,
        loss: &str,
        stage: u8,
        truth: &LandmarkSet,
        predicted: &LandmarkSet,
    ) -> Result<Self> {
        let landmark_errors = euclid_errors(truth, predicted)?
            .into_iter()
            .map(|(name, error_mm)| LandmarkError { name, error_mm })
            .collect();
        let (mut dpp_mm, mut angle_deg) = (None, None);
        if truth.len() == 3 {
            let gt: [_; 3] = std::array::from_fn(|i| truth.points[i].position);
            let pr: [_; 3] = std::array::from_fn(|i| predicted.get(&truth.points[i].name).unwrap_or_default());
            if let (Ok(a), Ok(b)) = (plane_from_points(gt[0], gt[1], gt[2]), plane_from_points(pr[0], pr[1], pr[2])) {
                dpp_mm = avg_projection_distance(&gt, &pr).ok();
                angle_deg = Some(plane_angle(&a, &b));
            }
        }
        Ok(Self {
            sample_id: sample_id.into(),
            quality,
            loss: loss.into(),
            stage,
            landmark_errors,
            dpp_mm,
            angle_deg,
            truth: truth.clone(),
            predicted: predicted.clone(),
        })
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub worst: f64,
    pub mean: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        Some(Self {
            count: s.len(),
            q25: quantile_sorted(&s, 0.25),
            median: quantile_sorted(&s, 0.5),
            q75: quantile_sorted(&s, 0.75),
            worst: s[s.len() - 1],
            mean: s.iter().sum::<f64>() / s.len() as f64,
        })
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    Summary::of(values).map(|s| s.median)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdrPoint {
    pub threshold_mm: f64,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub samples: usize,
    /// Pooled over all landmarks.
    pub landmark_error: Summary,
    pub per_landmark: Vec<(String, Summary)>,
    pub dpp_mm: Option<Summary>,
    pub angle_deg: Option<Summary>,
    pub sdr: Vec<SdrPoint>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKey {
    Quality,
    Loss,
    Stage,
}

impl std::str::FromStr for GroupKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quality" => Ok(GroupKey::Quality),
            "loss" => Ok(GroupKey::Loss),
            "stage" => Ok(GroupKey::Stage),
            _ => Err(Error::InvalidArgument(format!("unknown grouping `{s}` (quality, loss, stage)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub key: String,
    pub aggregate: Aggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub thresholds_mm: Vec<f64>,
    pub samples: Vec<SampleEval>,
}

/// The JSON layout: the report plus derived aggregates.
#[derive(Serialize, Deserialize)]
struct ReportFile {
    schema_version: u32,
    thresholds_mm: Vec<f64>,
    overall: Option<Aggregate>,
    by_quality: Vec<Group>,
    by_loss: Vec<Group>,
    by_stage: Vec<Group>,
    samples: Vec<SampleEval>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    schema_version: u32,
    sample_id: &'a str,
    quality: Quality,
    loss: &'a str,
    stage: u8,
    landmark: &'a str,
    error_mm: f64,
    dpp_mm: Option<f64>,
    angle_deg: Option<f64>,
}

/// Default SDR thresholds in mm.
pub fn default_thresholds() -> Vec<f64> {
    (1..=20).map(|i| i as f64 * 0.5).collect()
}

impl EvalReport {
    pub fn new(thresholds_mm: Vec<f64>) -> Self {
        Self { schema_version: REPORT_SCHEMA_VERSION, thresholds_mm, samples: Vec::new() }
    }

    pub fn push(&mut self, s: SampleEval) {
        self.samples.push(s);
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Every landmark error, sample-major.
    pub fn errors(&self) -> Vec<f64> {
        self.samples.iter().flat_map(|s| s.landmark_errors.iter().map(|e| e.error_mm)).collect()
    }

    pub fn median_error(&self) -> Option<f64> {
        median(&self.errors())
    }

    pub fn aggregate_of(&self, samples: &[&SampleEval]) -> Result<Aggregate> {
        let errors: Vec<f64> = samples.iter().flat_map(|s| s.landmark_errors.iter().map(|e| e.error_mm)).collect();
        let landmark_error =
            Summary::of(&errors).ok_or_else(|| Error::InvalidArgument("cannot aggregate an empty report".into()))?;
        let mut names: Vec<&str> = Vec::new();
        for s in samples {
            for e in &s.landmark_errors {
                if !names.contains(&e.name.as_str()) {
                    names.push(&e.name);
                }
            }
        }
        let per_landmark = names
            .iter()
            .filter_map(|n| {
                let v: Vec<f64> = samples
                    .iter()
                    .flat_map(|s| s.landmark_errors.iter().filter(|e| e.name == *n).map(|e| e.error_mm))
                    .collect();
                Summary::of(&v).map(|s| (n.to_string(), s))
            })
            .collect();
        let dpp: Vec<f64> = samples.iter().filter_map(|s| s.dpp_mm).collect();
        let angle: Vec<f64> = samples.iter().filter_map(|s| s.angle_deg).collect();
        let rates = sdr(&errors, &self.thresholds_mm)?;
        Ok(Aggregate {
            samples: samples.len(),
            landmark_error,
            per_landmark,
            dpp_mm: Summary::of(&dpp),
            angle_deg: Summary::of(&angle),
            sdr: self.thresholds_mm.iter().zip(rates).map(|(&threshold_mm, rate)| SdrPoint { threshold_mm, rate }).collect(),
        })
    }

    pub fn overall(&self) -> Result<Aggregate> {
        self.aggregate_of(&self.samples.iter().collect::<Vec<_>>())
    }

    /// Aggregates per group; quality groups are ordered worst to best grade.
    pub fn grouped(&self, key: GroupKey) -> Result<Vec<Group>> {
        let mut keys: Vec<(String, String)> = Vec::new();
        let label = |s: &SampleEval| -> (String, String) {
            match key {
                GroupKey::Quality => (format!("{:?}", s.quality as u8), s.quality.to_string()),
                GroupKey::Loss => (s.loss.clone(), s.loss.clone()),
                GroupKey::Stage => (format!("{:03}", s.stage), s.stage.to_string()),
            }
        };
        for s in &self.samples {
            let k = label(s);
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        keys.sort();
        keys.into_iter()
            .map(|(sort, name)| {
                let members: Vec<&SampleEval> = self.samples.iter().filter(|s| label(s).0 == sort).collect();
                Ok(Group { key: name, aggregate: self.aggregate_of(&members)? })
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for s in &self.samples {
            for e in &s.landmark_errors {
                w.serialize(CsvRow {
                    schema_version: self.schema_version,
                    sample_id: &s.sample_id,
                    quality: s.quality,
                    loss: &s.loss,
                    stage: s.stage,
                    landmark: &e.name,
                    error_mm: e.error_mm,
                    dpp_mm: s.dpp_mm,
                    angle_deg: s.angle_deg,
                })
                .map_err(|e| csv_err(path, e))?;
            }
        }
        w.flush().map_err(io_err(path))?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let file = ReportFile {
            schema_version: self.schema_version,
            thresholds_mm: self.thresholds_mm.clone(),
            overall: if self.is_empty() { None } else { Some(self.overall()?) },
            by_quality: self.grouped(GroupKey::Quality)?,
            by_loss: self.grouped(GroupKey::Loss)?,
            by_stage: self.grouped(GroupKey::Stage)?,
            samples: self.samples.clone(),
        };
        fs::write(path, serde_json::to_string_pretty(&file)?).map_err(io_err(path))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let file: ReportFile =
            serde_json::from_str(&text).map_err(|e| Error::Format { path: path.into(), message: e.to_string() })?;
        if file.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::UnsupportedVersion { path: path.into(), version: file.schema_version as u64 });
        }
        Ok(Self { schema_version: file.schema_version, thresholds_mm: file.thresholds_mm, samples: file.samples })
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format { path: path.into(), message: e.to_string() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lms(offset: f64) -> LandmarkSet {
        LandmarkSet::from_pairs([
            ("RCC", [offset, 0.0, 0.0]),
            ("LCC", [10.0, 0.0, 0.0]),
            ("NCC", [0.0, 10.0, 0.0]),
        ])
        .unwrap()
    }

    fn report() -> EvalReport {
        let mut r = EvalReport::new(vec![1.0, 2.0, 4.0]);
        for (i, (q, off)) in [(Quality::Excellent, 0.0), (Quality::Poor, 3.0), (Quality::Fair, 1.5)].iter().enumerate() {
            r.push(SampleEval::new(&format!("s{i}"), *q, "GLiP", 1, &lms(0.0), &lms(*off)).unwrap());
        }
        r
    }

    #[test]
    fn quantiles_interpolate_linearly() {
        let s = Summary::of(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!((s.q25, s.median, s.q75, s.worst, s.mean), (1.75, 2.5, 3.25, 4.0, 2.5));
        assert!(Summary::of(&[]).is_none());
    }

    #[test]
    fn sample_eval_computes_plane_metrics() {
        let s = SampleEval::new("a", Quality::Good, "MSE", 1, &lms(0.0), &lms(0.0)).unwrap();
        assert_eq!(s.dpp_mm, Some(0.0));
        assert_eq!(s.angle_deg, Some(0.0));
        let collinear = LandmarkSet::from_pairs([("RCC", [0.0; 3]), ("LCC", [1.0; 3]), ("NCC", [2.0; 3])]).unwrap();
        let s = SampleEval::new("b", Quality::Good, "MSE", 1, &lms(0.0), &collinear).unwrap();
        assert!(s.dpp_mm.is_none());
    }

    #[test]
    fn quality_groups_are_ordered_by_grade() {
        let g = report().grouped(GroupKey::Quality).unwrap();
        let keys: Vec<&str> = g.iter().map(|g| g.key.as_str()).collect();
        assert_eq!(keys, ["2", "3-", "4"]);
        assert_eq!(g[0].aggregate.landmark_error.worst, 3.0);
    }

    #[test]
    fn overall_sdr_counts_strictly_below() {
        let a = report().overall().unwrap();
        // errors: six zeros, 3.0, 1.5 plus pooled per landmark
        let rates: Vec<f64> = a.sdr.iter().map(|p| p.rate).collect();
        assert_eq!(rates, [7.0 / 9.0, 8.0 / 9.0, 1.0]);
    }

    #[test]
    fn csv_has_header_and_schema_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        report().write_csv(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "schema_version,sample_id,quality,loss,stage,landmark,error_mm,dpp_mm,angle_deg");
        assert!(lines.next().unwrap().starts_with("1,s0,4,GLiP,1,RCC,0"));
        assert_eq!(text.lines().count(), 10);
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let r = report();
        r.write_json(&path).unwrap();
        assert_eq!(EvalReport::read_json(&path).unwrap(), r);
    }
}
