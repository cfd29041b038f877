//! Static SVG charts rendered from result files.

use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use plotters::prelude::*;
use serde_json::Value;

use timedet::eval::{EvalReport, ProbeResult};
use timedet::train::EpochRecord;

/// A result file that does not have the expected structure.
#[derive(Debug)]
pub struct SchemaError(pub String);

impl fmt::Display for SchemaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "schema error: {}", self.0)
    }
}

impl std::error::Error for SchemaError {}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn read_value(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| SchemaError(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| SchemaError(format!("{} is not JSON: {e}", path.display())).into())
}

/// Parses history.json, naming the first entry that lacks a required key.
pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let value = read_value(path)?;
    let entries = value
        .as_array()
        .ok_or_else(|| SchemaError(format!("{}: expected a list of epoch records", path.display())))?;
    for (i, e) in entries.iter().enumerate() {
        for key in ["epoch", "loss", "instability", "decoder", "encoder", "grad_norm", "lr"] {
            if e.get(key).is_none() {
                return Err(SchemaError(format!("{}: entry {i} is missing `{key}`", path.display())).into());
            }
        }
    }
    serde_json::from_value(value).map_err(|e| SchemaError(format!("{}: {e}", path.display())).into())
}

/// `(epoch, IS)` for every epoch that has a predecessor.
pub fn instability_points(history: &[EpochRecord]) -> Vec<(f64, f64)> {
    history
        .iter()
        .filter_map(|r| r.instability.map(|v| (r.epoch as f64, v)))
        .collect()
}

fn bounds(series: &[(String, Vec<(f64, f64)>)]) -> ((f64, f64), (f64, f64)) {
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return ((0.0, 1.0), (0.0, 1.0));
    }
    let pad = |lo: f64, hi: f64| {
        if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            let m = 0.05 * (hi - lo);
            (lo - m, hi + m)
        }
    };
    (pad(x0, x1), pad(y0, y1))
}

pub fn line_chart(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let ((x0, x1), (y0, y1)) = bounds(series);
    let root = SVGBackend::new(path, (720, 440)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, y0..y1)?;
    chart.configure_mesh().x_desc(x_label).y_desc(y_label).draw()?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart.draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))?;
    }
    if series.len() > 1 {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()?;
    }
    root.present().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn bar_chart(path: &Path, title: &str, y_label: &str, bars: &[(String, f64)]) -> Result<()> {
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE)?;
    let top = bars.iter().map(|b| b.1).fold(0.0f64, f64::max).max(1e-9) * 1.1;
    let labels: Vec<String> = bars.iter().map(|b| b.0.clone()).collect();
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0.0..bars.len() as f64, 0.0..top)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(bars.len().max(1))
        .x_label_formatter(&|x| {
            let i = x.floor() as usize;
            labels.get(i).cloned().unwrap_or_default()
        })
        .y_desc(y_label)
        .draw()?;
    chart.draw_series(
        bars.iter()
            .enumerate()
            .map(|(i, b)| Rectangle::new([(i as f64 + 0.15, 0.0), (i as f64 + 0.85, b.1)], PALETTE[0].filled())),
    )?;
    root.present().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn probe_chart(path: &Path, results: &[ProbeResult]) -> Result<()> {
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for r in results {
        let name = r.target.as_str().to_string();
        match series.iter_mut().find(|s| s.0 == name) {
            Some(s) => s.1.push((r.noise_alpha, r.delta)),
            None => series.push((name, vec![(r.noise_alpha, r.delta)])),
        }
    }
    line_chart(path, "mAP change under offset noise", "noise alpha", "delta mAP@AVG", &series)
}

/// Renders every chart the given files support into `out`.
pub fn plot(history: &Path, results: Option<&Path>, probe: Option<&Path>, out: &Path) -> Result<()> {
    let records = read_history(history)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let epochs = |f: &dyn Fn(&EpochRecord) -> f64| records.iter().map(|r| (r.epoch as f64, f(r))).collect::<Vec<_>>();
    line_chart(
        &out.join("loss.svg"),
        "Training loss",
        "epoch",
        "loss",
        &[
            ("total".to_string(), epochs(&|r| r.loss)),
            ("decoder".to_string(), epochs(&|r| r.decoder.total())),
            ("encoder".to_string(), epochs(&|r| r.encoder.total())),
        ],
    )?;
    line_chart(
        &out.join("instability.svg"),
        "Matching instability",
        "epoch",
        "IS",
        &[("IS".to_string(), instability_points(&records))],
    )?;
    let evals: Vec<(f64, f64)> = records
        .iter()
        .filter_map(|r| r.eval.as_ref().map(|m| (r.epoch as f64, m.average)))
        .collect();
    if !evals.is_empty() {
        line_chart(&out.join("map.svg"), "Validation mAP@AVG", "epoch", "mAP", &[("mAP@AVG".to_string(), evals)])?;
    }
    if let Some(p) = results {
        let report: EvalReport = serde_json::from_value(read_value(p)?).map_err(|e| SchemaError(format!("{}: {e}", p.display())))?;
        let bars: Vec<(String, f64)> = report
            .false_negatives
            .iter()
            .map(|b| (b.label.clone(), b.rate.unwrap_or(0.0)))
            .collect();
        bar_chart(&out.join("false_negatives.svg"), "False-negative rate by length", "FN rate", &bars)?;
    }
    if let Some(p) = probe {
        let results: Vec<ProbeResult> =
            serde_json::from_value(read_value(p)?).map_err(|e| SchemaError(format!("{}: {e}", p.display())))?;
        probe_chart(&out.join("probe.svg"), &results)?;
    }
    Ok(())
}
