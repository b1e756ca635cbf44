//! Metric reports: the metrics record file, curve plots and
//! dataset-by-model tables.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::metrics::{
    auc_from_curve, eer_from_curve, far_frr_curve, frr100_from_curve, CurvePoint, EerResult, MetricError, Provenance,
    ScoreSet,
};

/// Everything derived from one score set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub eer: f64,
    /// Curve points on either side of the FAR/FRR crossing.
    pub eer_bracket: (CurvePoint, CurvePoint),
    pub frr100: f64,
    pub frr100_feasible: bool,
    pub auc: f64,
    pub curve: Vec<CurvePoint>,
    pub n_authentic: usize,
    pub n_imposter: usize,
    pub provenance: Provenance,
}

impl MetricReport {
    pub fn from_scores(scores: &ScoreSet) -> Result<Self, MetricError> {
        let curve = far_frr_curve(scores)?;
        let EerResult { eer, lower, upper } = eer_from_curve(&curve);
        let f = frr100_from_curve(&curve);
        Ok(Self {
            eer,
            eer_bracket: (lower, upper),
            frr100: f.frr,
            frr100_feasible: f.feasible,
            auc: auc_from_curve(&curve),
            curve,
            n_authentic: scores.authentic.len(),
            n_imposter: scores.imposter.len(),
            provenance: scores.provenance.clone(),
        })
    }
}

/// One line of the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub dataset_id: String,
    pub model_id: String,
    pub tap: String,
    pub eer: f64,
    pub frr100: f64,
    pub auc: f64,
    pub n_authentic: usize,
    pub n_imposter: usize,
    pub seed: u64,
}

impl MetricsRecord {
    pub fn new(report: &MetricReport, dataset_id: &str, seed: u64) -> Self {
        Self {
            dataset_id: dataset_id.to_string(),
            model_id: report.provenance.model_id.clone(),
            tap: report.provenance.tap.clone(),
            eer: report.eer,
            frr100: report.frr100,
            auc: report.auc,
            n_authentic: report.n_authentic,
            n_imposter: report.n_imposter,
            seed,
        }
    }
}

pub fn metrics_to_text(records: &[MetricsRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("metrics records serialise") + "\n")
        .collect()
}

pub fn write_metrics(records: &[MetricsRecord], path: impl AsRef<Path>) -> std::io::Result<()> {
    crate::registry::write_file(path.as_ref(), metrics_to_text(records).as_bytes())
}

pub fn read_metrics(path: impl AsRef<Path>) -> std::io::Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// Paths written by [`emit_report`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub metrics: PathBuf,
    pub far_frr_plot: PathBuf,
    pub roc_plot: PathBuf,
}

fn slug(s: &str) -> String {
    let s: String = s
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect();
    if s.is_empty() {
        "unnamed".into()
    } else {
        s
    }
}

/// File stem shared by a report's outputs: dataset, model and tap.
pub fn report_stem(report: &MetricReport, dataset_id: &str) -> String {
    format!("{}__{}__{}", slug(dataset_id), slug(&report.provenance.model_id), slug(&report.provenance.tap))
}

/// Writes `<stem>.metrics.jsonl`, `<stem>.far_frr.png` and `<stem>.roc.png`
/// into `out_dir`.
pub fn emit_report(report: &MetricReport, dataset_id: &str, seed: u64, out_dir: &Path) -> std::io::Result<ReportFiles> {
    fs::create_dir_all(out_dir)?;
    let stem = report_stem(report, dataset_id);
    let files = ReportFiles {
        metrics: out_dir.join(format!("{stem}.metrics.jsonl")),
        far_frr_plot: out_dir.join(format!("{stem}.far_frr.png")),
        roc_plot: out_dir.join(format!("{stem}.roc.png")),
    };
    write_metrics(&[MetricsRecord::new(report, dataset_id, seed)], &files.metrics)?;
    let to_io = |e: image::ImageError| std::io::Error::other(e.to_string());
    far_frr_plot(&report.curve).save(&files.far_frr_plot).map_err(to_io)?;
    roc_plot(&report.curve).save(&files.roc_plot).map_err(to_io)?;
    Ok(files)
}

pub const PLOT_SIZE: (u32, u32) = (480, 360);
const MARGIN: u32 = 30;
pub const FAR_COLOR: [u8; 3] = [200, 40, 40];
pub const FRR_COLOR: [u8; 3] = [30, 90, 200];

/// Plot canvas with unit axes; data coordinates are mapped from the given
/// ranges to the inner rectangle.
struct Canvas {
    img: RgbImage,
    x_range: (f64, f64),
    y_range: (f64, f64),
}

impl Canvas {
    fn new(x_range: (f64, f64), y_range: (f64, f64)) -> Self {
        let (w, h) = PLOT_SIZE;
        let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
        let axis = Rgb([0, 0, 0]);
        for x in MARGIN..w - MARGIN / 2 {
            img.put_pixel(x, h - MARGIN, axis);
        }
        for y in MARGIN / 2..=h - MARGIN {
            img.put_pixel(MARGIN, y, axis);
        }
        // Ticks at tenths of each axis.
        for k in 0..=10 {
            let tx = MARGIN + k * (w - MARGIN - MARGIN / 2) / 10;
            let ty = h - MARGIN - k * (h - MARGIN - MARGIN / 2) / 10;
            for d in 1..5 {
                img.put_pixel(tx, h - MARGIN + d, axis);
                img.put_pixel(MARGIN - d, ty, axis);
            }
        }
        Self { img, x_range, y_range }
    }

    fn to_px(&self, x: f64, y: f64) -> (f64, f64) {
        let (w, h) = PLOT_SIZE;
        let inner_w = f64::from(w - MARGIN - MARGIN / 2);
        let inner_h = f64::from(h - MARGIN - MARGIN / 2);
        let span = |r: (f64, f64)| if r.1 > r.0 { r.1 - r.0 } else { 1.0 };
        let fx = (x - self.x_range.0) / span(self.x_range);
        let fy = (y - self.y_range.0) / span(self.y_range);
        (f64::from(MARGIN) + fx.clamp(0.0, 1.0) * inner_w, f64::from(h - MARGIN) - fy.clamp(0.0, 1.0) * inner_h)
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), color: [u8; 3]) {
        let (x0, y0) = self.to_px(a.0, a.1);
        let (x1, y1) = self.to_px(b.0, b.1);
        let n = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as u32;
        for k in 0..=n {
            let t = f64::from(k) / f64::from(n);
            let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
            let (px, py) = (x.round() as u32, y.round() as u32);
            if px < self.img.width() && py < self.img.height() {
                self.img.put_pixel(px, py, Rgb(color));
            }
        }
    }

    fn polyline(&mut self, pts: &[(f64, f64)], color: [u8; 3]) {
        for w in pts.windows(2) {
            self.line(w[0], w[1], color);
        }
    }
}

/// FAR (red) and FRR (blue) against the threshold, drawn as step curves.
pub fn far_frr_plot(curve: &[CurvePoint]) -> RgbImage {
    let (lo, hi) = match (curve.first(), curve.last()) {
        (Some(a), Some(b)) => (a.threshold, b.threshold),
        _ => (0.0, 1.0),
    };
    let mut c = Canvas::new((lo, hi), (0.0, 1.0));
    let steps = |f: fn(&CurvePoint) -> f64| -> Vec<(f64, f64)> {
        let mut pts = Vec::with_capacity(curve.len() * 2);
        for (i, p) in curve.iter().enumerate() {
            if i > 0 {
                pts.push((p.threshold, f(&curve[i - 1])));
            }
            pts.push((p.threshold, f(p)));
        }
        pts
    };
    c.polyline(&steps(|p| p.far), FAR_COLOR);
    c.polyline(&steps(|p| p.frr), FRR_COLOR);
    c.img
}

/// ROC polyline (FAR on x, 1 - FRR on y) with the chance diagonal in grey.
pub fn roc_plot(curve: &[CurvePoint]) -> RgbImage {
    let mut c = Canvas::new((0.0, 1.0), (0.0, 1.0));
    c.line((0.0, 0.0), (1.0, 1.0), [180, 180, 180]);
    let pts: Vec<(f64, f64)> = curve.iter().rev().map(|p| (p.far, 1.0 - p.frr)).collect();
    c.polyline(&pts, FRR_COLOR);
    c.img
}

/// A dataset-by-model table of one metric.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub metric: String,
    pub models: Vec<String>,
    pub rows: Vec<(String, BTreeMap<String, f64>)>,
}

impl MetricsTable {
    pub fn new(metric: impl Into<String>) -> Self {
        Self { metric: metric.into(), ..Self::default() }
    }

    pub fn set(&mut self, dataset_id: &str, model_id: &str, value: f64) {
        if !self.models.iter().any(|m| m == model_id) {
            self.models.push(model_id.to_string());
        }
        match self.rows.iter_mut().find(|(d, _)| d == dataset_id) {
            Some((_, row)) => {
                row.insert(model_id.to_string(), value);
            }
            None => self.rows.push((dataset_id.to_string(), BTreeMap::from([(model_id.to_string(), value)]))),
        }
    }

    pub fn get(&self, dataset_id: &str, model_id: &str) -> Option<f64> {
        self.rows.iter().find(|(d, _)| d == dataset_id).and_then(|(_, r)| r.get(model_id).copied())
    }

    fn cells(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|(d, row)| {
                std::iter::once(d.clone())
                    .chain(self.models.iter().map(|m| row.get(m).map(|v| format!("{v:.6}")).unwrap_or_default()))
                    .collect()
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("dataset,{}\n", self.models.join(","));
        for r in self.cells() {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("| Dataset | {} |\n|---|{}\n", self.models.join(" | "), "---|".repeat(self.models.len()));
        for r in self.cells() {
            out.push_str(&format!("| {} |\n", r.join(" | ")));
        }
        out
    }

    /// Writes `<stem>.csv` and `<stem>.md`.
    pub fn write(&self, dir: &Path, stem: &str) -> std::io::Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir)?;
        let csv = dir.join(format!("{stem}.csv"));
        let md = dir.join(format!("{stem}.md"));
        fs::File::create(&csv)?.write_all(self.to_csv().as_bytes())?;
        fs::File::create(&md)?.write_all(self.to_markdown().as_bytes())?;
        Ok((csv, md))
    }
}
