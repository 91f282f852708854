//! SVG figures: error boxplots, SDR curves and annulus-plane scatter plots.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Result};
use glip_core::metrics::{plane_from_points, point_plane_distance, sdr, EvalReport, Plane, SampleEval};
use glip_core::vec3::{cross, dot, normalize, scale, sub, Vec3};
use plotters::coord::Shift;
use plotters::prelude::*;

use crate::{CliResult, PlotKind};

pub fn plot(reports: &[PathBuf], kind: PlotKind, out: &Path, sample: Option<&str>) -> CliResult {
    let report = crate::commands::merge_reports(reports)?;
    fs::create_dir_all(out).map_err(|e| anyhow!("creating {}: {e}", out.display()))?;
    let written = match kind {
        PlotKind::Box => vec![box_plot(&report, &out.join("box.svg"))?],
        PlotKind::Sdr => vec![sdr_plot(&report, &out.join("sdr.svg"))?],
        PlotKind::Plane => plane_plots(&report, out, sample)?,
    };
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn draw_err<E: std::fmt::Debug>(e: E) -> anyhow::Error {
    anyhow!("drawing failed: {e:?}")
}

/// Group label: the loss tag, plus the stage when it is not the first.
fn series_key(s: &SampleEval) -> String {
    if s.stage == 1 {
        s.loss.clone()
    } else {
        format!("{} stage {}", s.loss, s.stage)
    }
}

fn ordered_keys(report: &EvalReport) -> Vec<String> {
    let mut keys: Vec<String> = Vec::new();
    for s in &report.samples {
        let k = series_key(s);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys
}

/// One box per (group, landmark) plus one per group for the plane distance.
pub fn box_columns(report: &EvalReport) -> Vec<(String, Vec<f64>)> {
    let names: Vec<String> = report.samples[0].landmark_errors.iter().map(|e| e.name.clone()).collect();
    let mut cols = Vec::new();
    for key in ordered_keys(report) {
        let members: Vec<&SampleEval> = report.samples.iter().filter(|s| series_key(s) == key).collect();
        for name in &names {
            let v: Vec<f64> =
                members.iter().flat_map(|s| s.landmark_errors.iter().filter(|e| &e.name == name).map(|e| e.error_mm)).collect();
            if !v.is_empty() {
                cols.push((format!("{key} {name}"), v));
            }
        }
        let dpp: Vec<f64> = members.iter().filter_map(|s| s.dpp_mm).collect();
        if !dpp.is_empty() {
            cols.push((format!("{key} dPP"), dpp));
        }
    }
    cols
}

fn box_plot(report: &EvalReport, path: &Path) -> Result<PathBuf> {
    let cols = box_columns(report);
    let ymax = cols.iter().flat_map(|(_, v)| v.iter().copied()).fold(0.0f64, f64::max).max(1e-3) * 1.05;
    let width = (120 + 70 * cols.len()).max(480) as u32;
    let root = SVGBackend::new(path, (width, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let labels: Vec<String> = cols.iter().map(|(l, _)| l.clone()).collect();
    let mut chart = ChartBuilder::on(&root)
        .caption("Test landmark and plane errors", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(70)
        .y_label_area_size(60)
        .build_cartesian_2d((0..cols.len()).into_segmented(), 0f32..ymax as f32)
        .map_err(draw_err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(cols.len())
        .x_label_formatter(&|v| match v {
            SegmentValue::CenterOf(i) | SegmentValue::Exact(i) => labels.get(*i).cloned().unwrap_or_default(),
            SegmentValue::Last => String::new(),
        })
        .y_desc("error (mm)")
        .draw()
        .map_err(draw_err)?;
    chart
        .draw_series(cols.iter().enumerate().map(|(i, (_, v))| {
            Boxplot::new_vertical(SegmentValue::CenterOf(i), &Quartiles::new(v)).width(24).style(Palette99::pick(i))
        }))
        .map_err(draw_err)?;
    root.present().map_err(draw_err)?;
    Ok(path.to_path_buf())
}

/// SDR curve per loss and stage.
pub fn sdr_series(report: &EvalReport) -> Result<Vec<(String, Vec<(f64, f64)>)>> {
    ordered_keys(report)
        .into_iter()
        .map(|key| {
            let errors: Vec<f64> = report
                .samples
                .iter()
                .filter(|s| series_key(s) == key)
                .flat_map(|s| s.landmark_errors.iter().map(|e| e.error_mm))
                .collect();
            let rates = sdr(&errors, &report.thresholds_mm)?;
            Ok((key, report.thresholds_mm.iter().copied().zip(rates).collect()))
        })
        .collect()
}

fn sdr_plot(report: &EvalReport, path: &Path) -> Result<PathBuf> {
    let series = sdr_series(report)?;
    let xmax = report.thresholds_mm.last().copied().unwrap_or(1.0);
    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Success detection rate", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0f64..xmax, 0f64..1.0)
        .map_err(draw_err)?;
    chart.configure_mesh().x_desc("threshold (mm)").y_desc("SDR").draw().map_err(draw_err)?;
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(draw_err)?
            .label(label.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .position(SeriesLabelPosition::LowerRight)
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(draw_err)?;
    root.present().map_err(draw_err)?;
    Ok(path.to_path_buf())
}

/// In-plane coordinates: origin at the triple's centroid, first axis towards its first point.
struct PlaneFrame {
    plane: Plane,
    center: Vec3,
    u: Vec3,
    v: Vec3,
}

impl PlaneFrame {
    fn new(p: &[Vec3; 3]) -> Result<Self> {
        let plane = plane_from_points(p[0], p[1], p[2])?;
        let center = scale([0, 1, 2].iter().fold([0.0; 3], |a, &i| glip_core::vec3::add(a, p[i])), 1.0 / 3.0);
        let d = sub(p[0], center);
        let u = normalize(sub(d, scale(plane.normal, dot(d, plane.normal))));
        let v = cross(plane.normal, u);
        Ok(Self { plane, center, u, v })
    }

    /// Orthogonal projection onto the plane, in plane coordinates.
    fn project(&self, q: Vec3) -> (f64, f64) {
        let d = sub(q, self.center);
        (dot(d, self.u), dot(d, self.v))
    }
}

/// Per side: own points, the other triple's projections and their plane distances.
pub struct PlanePanel {
    pub title: &'static str,
    pub own: Vec<(String, (f64, f64))>,
    pub projected: Vec<((f64, f64), f64)>,
}

/// The ground-truth panel, and the predicted one unless the prediction is collinear.
pub fn plane_panels(s: &SampleEval) -> Result<Vec<PlanePanel>> {
    if s.truth.len() != 3 {
        bail!("sample {}: plane plots need exactly 3 landmarks", s.sample_id);
    }
    let names: Vec<String> = s.truth.points.iter().map(|p| p.name.clone()).collect();
    let gt: [Vec3; 3] = std::array::from_fn(|i| s.truth.points[i].position);
    let pr: [Vec3; 3] = std::array::from_fn(|i| s.predicted.get(&names[i]).unwrap_or_default());
    let panel = |title, own: &[Vec3; 3], other: &[Vec3; 3]| -> Result<PlanePanel> {
        let f = PlaneFrame::new(own)?;
        Ok(PlanePanel {
            title,
            own: names.iter().cloned().zip(own.iter().map(|&p| f.project(p))).collect(),
            projected: other.iter().map(|&q| (f.project(q), point_plane_distance(&f.plane, q))).collect(),
        })
    };
    let mut panels = vec![panel("ground-truth plane", &gt, &pr)?];
    match panel("predicted plane", &pr, &gt) {
        Ok(p) => panels.push(p),
        Err(e) => log::warn!("sample {}: no predicted plane: {e}", s.sample_id),
    }
    Ok(panels)
}

fn draw_panel(area: &DrawingArea<SVGBackend, Shift>, p: &PlanePanel) -> Result<()> {
    let all: Vec<(f64, f64)> = p.own.iter().map(|(_, c)| *c).chain(p.projected.iter().map(|(c, _)| *c)).collect();
    let r = all.iter().map(|(x, y)| x.abs().max(y.abs())).fold(1.0f64, f64::max) * 1.3;
    let mut chart = ChartBuilder::on(area)
        .caption(p.title, ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(40)
        .build_cartesian_2d(-r..r, -r..r)
        .map_err(draw_err)?;
    chart.configure_mesh().x_desc("mm").y_desc("mm").draw().map_err(draw_err)?;
    let mut ring: Vec<(f64, f64)> = p.own.iter().map(|(_, c)| *c).collect();
    ring.push(ring[0]);
    chart.draw_series(LineSeries::new(ring, GREEN.stroke_width(1))).map_err(draw_err)?;
    chart
        .draw_series(p.own.iter().map(|(name, c)| {
            EmptyElement::at(*c) + Circle::new((0, 0), 5, GREEN.filled()) + Text::new(name.clone(), (8, -12), ("sans-serif", 13))
        }))
        .map_err(draw_err)?;
    chart
        .draw_series(p.projected.iter().map(|(c, d)| {
            EmptyElement::at(*c)
                + Cross::new((0, 0), 5, RED.stroke_width(2))
                + Text::new(format!("{d:.2}"), (8, 4), ("sans-serif", 13).into_font().color(&RED))
        }))
        .map_err(draw_err)?;
    Ok(())
}

fn plane_plots(report: &EvalReport, out: &Path, sample: Option<&str>) -> Result<Vec<PathBuf>> {
    let chosen: Vec<&SampleEval> = match sample {
        Some(id) => report.samples.iter().filter(|s| s.sample_id == id).collect(),
        None => report.samples.iter().find(|s| s.dpp_mm.is_some()).or(report.samples.first()).into_iter().collect(),
    };
    if chosen.is_empty() {
        bail!("sample `{}` is not in the reports", sample.unwrap_or_default());
    }
    let mut written = Vec::new();
    for s in chosen {
        let panels = plane_panels(s)?;
        let tag: String = series_key(s).chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
        let path = out.join(format!("plane_{}_{tag}.svg", s.sample_id));
        let root = SVGBackend::new(&path, (960, 480)).into_drawing_area();
        root.fill(&WHITE).map_err(draw_err)?;
        let root = root
            .titled(&format!("{} ({}): projected distance (mm)", s.sample_id, series_key(s)), ("sans-serif", 18))
            .map_err(draw_err)?;
        let (left, right) = root.split_horizontally(480);
        draw_panel(&left, &panels[0])?;
        match panels.get(1) {
            Some(p) => draw_panel(&right, p)?,
            None => {
                right
                    .draw(&Text::new("predicted landmarks are collinear", (40, 200), ("sans-serif", 16)))
                    .map_err(draw_err)?;
            }
        }
        root.present().map_err(draw_err)?;
        written.push(path.clone());
    }
    Ok(written)
}
