use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Provenance;
use crate::error::{Error, Result};
use crate::metrics::{IterationReport, REPORT_COLUMNS};
use crate::select::{PoolAnnotation, SelectionResult, SelectionThresholds, Threshold};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SELECTION_FILE: &str = "selection.csv";

pub const SELECTION_COLUMNS: [&str; 9] = [
    "iteration",
    "class",
    "k",
    "accepted_unique",
    "above_threshold",
    "repetitions",
    "id_threshold",
    "ood_threshold",
    "final_threshold",
];

/// Per-class selection summary; `iteration` is the student it trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub iteration: usize,
    pub class: usize,
    pub k: usize,
    pub accepted_unique: usize,
    pub above_threshold: usize,
    pub repetitions: usize,
    pub id_threshold: Threshold,
    pub ood_threshold: f64,
    pub final_threshold: Threshold,
}

impl SelectionRow {
    pub fn from_selection(iteration: usize, sel: &SelectionResult, thr: &SelectionThresholds) -> Vec<Self> {
        sel.per_class
            .iter()
            .zip(&thr.per_class)
            .enumerate()
            .map(|(class, (c, t))| SelectionRow {
                iteration,
                class,
                k: sel.k,
                accepted_unique: c.accepted_unique,
                above_threshold: c.above_threshold,
                repetitions: c.repetitions,
                id_threshold: t.id,
                ood_threshold: t.ood,
                final_threshold: t.final_threshold,
            })
            .collect()
    }

    fn to_record(&self) -> Vec<String> {
        vec![
            self.iteration.to_string(),
            self.class.to_string(),
            self.k.to_string(),
            self.accepted_unique.to_string(),
            self.above_threshold.to_string(),
            self.repetitions.to_string(),
            self.id_threshold.to_string(),
            self.ood_threshold.to_string(),
            self.final_threshold.to_string(),
        ]
    }

    fn from_record(r: &csv::StringRecord) -> Result<Self> {
        let field = |i: usize| r.get(i).ok_or_else(|| Error::Format(format!("missing column {}", SELECTION_COLUMNS[i])));
        let num = |i: usize| -> Result<usize> {
            field(i)?
                .parse()
                .map_err(|_| Error::Format(format!("bad {}", SELECTION_COLUMNS[i])))
        };
        Ok(Self {
            iteration: num(0)?,
            class: num(1)?,
            k: num(2)?,
            accepted_unique: num(3)?,
            above_threshold: num(4)?,
            repetitions: num(5)?,
            id_threshold: field(6)?.parse()?,
            ood_threshold: field(7)?
                .parse()
                .map_err(|_| Error::Format("bad ood_threshold".into()))?,
            final_threshold: field(8)?.parse()?,
        })
    }
}

pub fn write_metrics_csv(path: &Path, history: &[IterationReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(REPORT_COLUMNS)?;
    for r in history {
        w.write_record(r.to_record())?;
    }
    w.flush().map_err(Error::at(path))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<IterationReport>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(REPORT_COLUMNS) {
        return Err(Error::Format(format!("{}: unexpected header", path.display())));
    }
    r.records()
        .map(|rec| {
            let rec = rec?;
            let fields: Vec<&str> = rec.iter().collect();
            IterationReport::from_record(&fields)
        })
        .collect()
}

pub fn write_selection_csv(path: &Path, rows: &[SelectionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SELECTION_COLUMNS)?;
    for r in rows {
        w.write_record(r.to_record())?;
    }
    w.flush().map_err(Error::at(path))
}

pub fn read_selection_csv(path: &Path) -> Result<Vec<SelectionRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.records().map(|rec| SelectionRow::from_record(&rec?)).collect()
}

/// `selected_t<i>.csv` holds what training sees; the provenance of the
/// same samples goes to the separate `audit_t<i>.csv`.
pub fn write_selection_dumps(
    out: &Path,
    iteration: usize,
    sel: &SelectionResult,
    ann: &PoolAnnotation,
    provenance: &[Provenance],
) -> Result<()> {
    let path = out.join(format!("selected_t{iteration}.csv"));
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["pool_index", "class", "copies", "confidence"])?;
    for e in &sel.entries {
        w.write_record([
            e.index.to_string(),
            e.class.to_string(),
            e.copies.to_string(),
            ann.confidence()[e.index].to_string(),
        ])?;
    }
    w.flush().map_err(Error::at(&path))?;

    let path = out.join(format!("audit_t{iteration}.csv"));
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["pool_index", "class", "component", "in_distribution"])?;
    for e in &sel.entries {
        let p = provenance[e.index];
        w.write_record([
            e.index.to_string(),
            e.class.to_string(),
            p.component.to_string(),
            p.in_distribution.to_string(),
        ])?;
    }
    w.flush().map_err(Error::at(&path))
}

/// One named series of `(x, y)` points.
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Minimal standalone SVG line chart with integer x ticks.
pub fn svg_line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 150.0, 40.0, 50.0);
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1.0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.1).max(1e-3 * y1.abs().max(1e-3));
    (y0, y1) = (y0 - pad, y1 + pad);
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, w / 2.0, escape(title));
    let (ax0, ax1, ay0, ay1) = (left, w - right, top, h - bottom);
    let _ = writeln!(
        s,
        r#"<path d="M{ax0} {ay0} L{ax0} {ay1} L{ax1} {ay1}" stroke="black" fill="none"/>"#
    );
    let mut xt = x0.ceil();
    while xt <= x1 + 1e-9 {
        let x = px(xt);
        let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{ay1}" x2="{x:.2}" y2="{}" stroke="black"/>"#, ay1 + 5.0);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{}" text-anchor="middle">{xt}</text>"#, ay1 + 18.0);
        xt += ((x1 - x0) / 10.0).ceil().max(1.0);
    }
    for i in 0..=4 {
        let v = y0 + (y1 - y0) * i as f64 / 4.0;
        let y = py(v);
        let _ = writeln!(s, r#"<line x1="{}" y1="{y:.2}" x2="{ax0}" y2="{y:.2}" stroke="black"/>"#, ax0 - 5.0);
        let _ = writeln!(s, r##"<line x1="{ax0}" y1="{y:.2}" x2="{ax1}" y2="{y:.2}" stroke="#ddd"/>"##);
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{v:.4}</text>"#, ax0 - 8.0, y + 4.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (ax0 + ax1) / 2.0,
        h - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(16 {}) rotate(-90)" text-anchor="middle">{}</text>"#,
        (ay0 + ay1) / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = ser
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path.join(" ")
        );
        for &(x, y) in &ser.points {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{color}"/>"#, px(x), py(y));
        }
        let ly = top + 10.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            ax1 + 15.0,
            ax1 + 35.0
        );
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, ax1 + 40.0, ly + 4.0, escape(&ser.name));
    }
    s.push_str("</svg>\n");
    s
}

fn series(name: &str, history: &[IterationReport], f: impl Fn(&IterationReport) -> Option<f64>) -> Series {
    Series {
        name: name.to_string(),
        points: history
            .iter()
            .filter_map(|r| f(r).map(|v| (r.iteration as f64, v)))
            .collect(),
    }
}

/// Metrics CSV, selection CSV and three SVG plots.
pub fn emit_report(out: &Path, history: &[IterationReport], selections: &[SelectionRow]) -> Result<()> {
    if history.is_empty() {
        return Err(Error::Empty("report history"));
    }
    write_metrics_csv(&out.join(METRICS_FILE), history)?;
    write_selection_csv(&out.join(SELECTION_FILE), selections)?;

    let mode = &history[0].mode;
    let plots = [
        (
            "test_error.svg",
            svg_line_plot(
                &format!("{mode}: test error"),
                "iteration",
                "test error",
                &[series("test error", history, |r| Some(r.test_error))],
            ),
        ),
        (
            "auroc.svg",
            svg_line_plot(
                &format!("{mode}: OOD AUROC"),
                "iteration",
                "AUROC",
                &[
                    series("near OOD", history, |r| Some(r.auroc)),
                    series("far OOD", history, |r| r.auroc_far),
                ],
            ),
        ),
        ("accepted.svg", {
            let k = history.iter().map(|r| r.accepted_per_class.len()).max().unwrap_or(0);
            let per_class: Vec<Series> = (0..k)
                .map(|c| {
                    series(&format!("class {c}"), &history[1..], |r| {
                        r.accepted_per_class.get(c).map(|&v| v as f64)
                    })
                })
                .collect();
            svg_line_plot(&format!("{mode}: accepted unique samples"), "iteration", "accepted", &per_class)
        }),
    ];
    for (name, svg) in plots {
        let path = out.join(name);
        std::fs::write(&path, svg).map_err(Error::at(&path))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(t: usize) -> IterationReport {
        IterationReport {
            iteration: t,
            mode: "ODST".into(),
            test_error: 0.1 / (t + 1) as f64,
            auroc: 0.9,
            auroc_far: Some(0.99),
            ece_before: 0.05,
            ece_after: 0.01,
            temperature: 0.8,
            k: (t > 0).then_some(5000 * t),
            accepted_per_class: vec![t, 2 * t],
            selected_total: 3 * t,
            selection_precision: (t > 0).then_some(0.97),
            selection_recall_in_pool: None,
            label_accuracy: None,
            max_rest_confidence: None,
        }
    }

    #[test]
    fn metrics_roundtrip_and_plots() {
        let dir = tempfile::tempdir().unwrap();
        let history: Vec<_> = (0..4).map(row).collect();
        let sel = vec![SelectionRow {
            iteration: 1,
            class: 0,
            k: 5000,
            accepted_unique: 10,
            above_threshold: 12,
            repetitions: 4990,
            id_threshold: Threshold::AboveOne,
            ood_threshold: 0.41,
            final_threshold: Threshold::AboveOne,
        }];
        emit_report(dir.path(), &history, &sel).unwrap();
        assert_eq!(read_metrics_csv(&dir.path().join(METRICS_FILE)).unwrap(), history);
        assert_eq!(read_selection_csv(&dir.path().join(SELECTION_FILE)).unwrap(), sel);
        let svg = std::fs::read_to_string(dir.path().join("test_error.svg")).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<circle").count(), 4);
    }

    #[test]
    fn single_row_report() {
        let dir = tempfile::tempdir().unwrap();
        emit_report(dir.path(), &[row(0)], &[]).unwrap();
        let text = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(emit_report(dir.path(), &[], &[]).is_err());
    }
}
