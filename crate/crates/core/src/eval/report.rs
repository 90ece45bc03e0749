//! `report.json`, `confusion.csv`, `roc.svg` and `curves.svg`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ConfusionMatrix, Metrics, Roc};

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: u32,
    /// Free-form run description. Anything run-specific and
    /// nondeterministic belongs here and nowhere else.
    pub metadata: BTreeMap<String, String>,
    pub classes: Vec<String>,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
    pub roc: Roc,
    pub history: Vec<EpochRecord>,
}

impl EvalReport {
    pub fn new(classes: Vec<String>, confusion: ConfusionMatrix, metrics: Metrics, roc: Roc) -> EvalReport {
        EvalReport {
            schema: REPORT_SCHEMA,
            metadata: BTreeMap::new(),
            classes,
            confusion,
            metrics,
            roc,
            history: Vec::new(),
        }
    }

    pub fn to_json(&self) -> Result<String, ReportError> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<EvalReport, ReportError> {
        Ok(serde_json::from_str(text)?)
    }
}

fn write(path: PathBuf, text: &str) -> Result<PathBuf, ReportError> {
    fs::write(&path, text).map_err(|source| ReportError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

/// Writes the report files into `dir` (created if needed) and returns their
/// paths. `curves.svg` is written only when the report has a history.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    fs::create_dir_all(dir).map_err(|source| ReportError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut written = vec![
        write(dir.join("report.json"), &report.to_json()?)?,
        write(dir.join("confusion.csv"), &confusion_csv(&report.confusion))?,
        write(dir.join("roc.svg"), &roc_svg(report))?,
    ];
    if !report.history.is_empty() {
        written.push(write(dir.join("curves.svg"), &curves_svg(&report.history))?);
    }
    Ok(written)
}

fn confusion_csv(m: &ConfusionMatrix) -> String {
    m.counts
        .iter()
        .map(|row| row.iter().map(u64::to_string).collect::<Vec<_>>().join(",") + "\n")
        .collect()
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
const SIZE: f64 = 320.0;
const MARGIN: f64 = 40.0;

/// A unit-square plot panel with its origin at `(ox, oy)` in SVG space.
struct Panel {
    ox: f64,
    oy: f64,
}

impl Panel {
    fn point(&self, x: f64, y: f64) -> String {
        format!("{:.2},{:.2}", self.ox + x * SIZE, self.oy + (1.0 - y) * SIZE)
    }

    fn frame(&self, svg: &mut String, title: &str, xlabel: &str, ylabel: &str) {
        let (x0, y0, x1, y1) = (self.ox, self.oy, self.ox + SIZE, self.oy + SIZE);
        let _ = writeln!(
            svg,
            r#"<rect x="{x0}" y="{y0}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#
        );
        for t in [0.0, 0.5, 1.0] {
            let x = x0 + t * SIZE;
            let y = y1 - t * SIZE;
            let _ = writeln!(
                svg,
                r#"<text x="{x}" y="{}" font-size="10" text-anchor="middle">{t}</text>"#,
                y1 + 14.0
            );
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{t}</text>"#,
                x0 - 4.0,
                y + 3.0
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{title}</text>"#,
            (x0 + x1) / 2.0,
            y0 - 8.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{xlabel}</text>"#,
            (x0 + x1) / 2.0,
            y1 + 30.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="middle" transform="rotate(-90 {} {})">{ylabel}</text>"#,
            x0 - 28.0,
            (y0 + y1) / 2.0,
            x0 - 28.0,
            (y0 + y1) / 2.0
        );
    }

    fn polyline(&self, svg: &mut String, class: &str, color: &str, pts: impl Iterator<Item = (f64, f64)>) {
        let pts: Vec<String> = pts.map(|(x, y)| self.point(x, y)).collect();
        let _ = writeln!(
            svg,
            r#"<polyline class="{class}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
    }

    fn legend(&self, svg: &mut String, row: usize, color: &str, label: &str) {
        let y = self.oy + 16.0 + 14.0 * row as f64;
        let x = self.ox + SIZE - 120.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/>"#,
            x + 14.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="10">{}</text>"#,
            x + 18.0,
            y + 3.0,
            escape(label)
        );
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn document(width: f64, height: f64, body: &str) -> String {
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n{body}</svg>\n"
    )
}

fn roc_svg(report: &EvalReport) -> String {
    let p = Panel {
        ox: MARGIN + 10.0,
        oy: MARGIN,
    };
    let mut svg = String::new();
    p.frame(&mut svg, "One-vs-rest ROC", "False positive rate", "True positive rate");
    let _ = writeln!(
        svg,
        r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#999" stroke-dasharray="4 3"/>"##,
        p.ox,
        p.oy + SIZE,
        p.ox + SIZE,
        p.oy
    );
    let mut row = 0;
    for (k, curve) in report.roc.per_class.iter().enumerate() {
        let Some(curve) = curve else { continue };
        let color = PALETTE[k % PALETTE.len()];
        p.polyline(&mut svg, "roc", color, curve.points.iter().copied());
        let name = report.classes.get(k).map_or_else(|| k.to_string(), Clone::clone);
        p.legend(&mut svg, row, color, &format!("{name} (AUC {:.3})", curve.auc));
        row += 1;
    }
    document(SIZE + 2.0 * MARGIN + 10.0, SIZE + 2.0 * MARGIN + 10.0, &svg)
}

fn curves_svg(history: &[EpochRecord]) -> String {
    let n = history.len();
    let x = |e: usize| if n > 1 { e as f64 / (n - 1) as f64 } else { 0.5 };
    let acc = Panel {
        ox: MARGIN + 10.0,
        oy: MARGIN,
    };
    let loss = Panel {
        ox: 2.0 * (MARGIN + 10.0) + SIZE + 10.0,
        oy: MARGIN,
    };
    let loss_max = history
        .iter()
        .flat_map(|r| [r.train_loss, r.val_loss])
        .filter(|v| v.is_finite())
        .fold(f64::MIN_POSITIVE, f64::max);
    let mut svg = String::new();
    acc.frame(&mut svg, "Accuracy", &format!("Epoch (1..{n})"), "Accuracy");
    loss.frame(
        &mut svg,
        &format!("Loss (scaled by {loss_max:.3})"),
        &format!("Epoch (1..{n})"),
        "Loss",
    );
    type Series<'a> = (&'a str, &'a Panel, fn(&EpochRecord) -> f64, f64);
    let series: [Series; 4] = [
        ("train accuracy", &acc, |r| r.train_accuracy, 1.0),
        ("val accuracy", &acc, |r| r.val_accuracy, 1.0),
        ("train loss", &loss, |r| r.train_loss, loss_max),
        ("val loss", &loss, |r| r.val_loss, loss_max),
    ];
    for (i, (label, panel, f, scale)) in series.into_iter().enumerate() {
        let color = PALETTE[i % 2];
        panel.polyline(
            &mut svg,
            "curve",
            color,
            history.iter().enumerate().map(|(e, r)| (x(e), f(r) / scale)),
        );
        panel.legend(&mut svg, i % 2, color, label);
    }
    document(2.0 * (SIZE + 2.0 * MARGIN + 10.0), SIZE + 2.0 * MARGIN + 10.0, &svg)
}
