//! Results table and box-plot rendering over stored evaluation CSVs.
//!
//! Layout under a results directory:
//! `eval/comparison.csv` (one row per fluid and model),
//! `eval/<fluid slug>.csv` (per-frame metrics of every model, optional), and
//! the rendered outputs in `reports/`.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datamodel::ModalityName;
use crate::metrics::FrameMetricsRow;
use crate::MetricsReport;
use crate::{Error, Result};

pub const EVAL_DIR: &str = "eval";
pub const REPORTS_DIR: &str = "reports";
pub const COMPARISON_FILE: &str = "comparison.csv";
pub const TABLE_FILE: &str = "results_table.txt";

pub const MODEL_UNET: &str = "unet";
pub const MODEL_BASE: &str = "foundation-base";
pub const MODEL_TUNED: &str = "foundation-tuned";

/// Display order of models in tables and plots.
const MODEL_ORDER: [&str; 3] = [MODEL_UNET, MODEL_BASE, MODEL_TUNED];
/// Display order of fluids.
const FLUID_ORDER: [ModalityName; 4] = [
    ModalityName::Water,
    ModalityName::FC72,
    ModalityName::Nitrogen,
    ModalityName::Argon,
];

pub fn model_label(key: &str) -> &str {
    match key {
        MODEL_UNET => "U-Net",
        MODEL_BASE => "Base",
        MODEL_TUNED => "Fine-tuned",
        other => other,
    }
}

fn model_rank(key: &str) -> (usize, &str) {
    (
        MODEL_ORDER
            .iter()
            .position(|&m| m == key)
            .unwrap_or(MODEL_ORDER.len()),
        key,
    )
}

fn fluid_rank(name: &str) -> (usize, &str) {
    let pos = name
        .parse::<ModalityName>()
        .ok()
        .and_then(|m| FLUID_ORDER.iter().position(|&f| f == m));
    (pos.unwrap_or(FLUID_ORDER.len()), name)
}

/// Mean scores of one model on one fluid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub fluid: String,
    pub model: String,
    pub iou: f64,
    pub f1: f64,
}

/// Per-frame scores of one model, as stored in `eval/<fluid slug>.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFrameRow {
    pub model: String,
    pub frame_index: usize,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub iou: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub specificity: f64,
}

impl ModelFrameRow {
    pub fn new(model: &str, frame_index: usize, r: &MetricsReport) -> Self {
        let f = FrameMetricsRow::new(frame_index, r);
        Self {
            model: model.to_string(),
            frame_index,
            tp: f.tp,
            fp: f.fp,
            fn_: f.fn_,
            tn: f.tn,
            iou: f.iou,
            f1: f.f1,
            precision: f.precision,
            recall: f.recall,
            accuracy: f.accuracy,
            specificity: f.specificity,
        }
    }

    pub fn score(&self, metric: &str) -> Option<f64> {
        match metric {
            "iou" => Some(self.iou),
            "f1" => Some(self.f1),
            "precision" => Some(self.precision),
            "recall" => Some(self.recall),
            "accuracy" => Some(self.accuracy),
            "specificity" => Some(self.specificity),
            _ => None,
        }
    }
}

pub fn fluid_csv_name(fluid: &str) -> String {
    let slug = fluid
        .parse::<ModalityName>()
        .map(|m| m.slug().to_string())
        .unwrap_or_else(|_| fluid.to_lowercase());
    format!("{slug}.csv")
}

pub fn write_model_frames(path: &Path, rows: &[ModelFrameRow]) -> Result<()> {
    write_rows(path, rows)
}

pub fn read_model_frames(path: &Path) -> Result<Vec<ModelFrameRow>> {
    if !path.is_file() {
        return Err(Error::MissingInput {
            name: "per-frame evaluation CSV".into(),
            path: path.to_path_buf(),
        });
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_comparison_csv(path: &Path, rows: &[ComparisonRow]) -> Result<()> {
    write_rows(path, rows)
}

pub fn read_comparison_csv(path: &Path) -> Result<Vec<ComparisonRow>> {
    if !path.is_file() {
        return Err(Error::MissingInput {
            name: COMPARISON_FILE.into(),
            path: path.to_path_buf(),
        });
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

fn sort_rows(rows: &mut [ComparisonRow]) {
    rows.sort_by(|a, b| {
        fluid_rank(&a.fluid)
            .cmp(&fluid_rank(&b.fluid))
            .then_with(|| model_rank(&a.model).cmp(&model_rank(&b.model)))
    });
}

/// Plain-text table, one block per fluid; the best score of each column
/// within a fluid carries a `*`.
pub fn render_table(rows: &[ComparisonRow]) -> String {
    let mut rows = rows.to_vec();
    sort_rows(&mut rows);
    let header = ["Fluid", "Model", "IoU", "F1 Score"];
    let mut cells: Vec<[String; 4]> = Vec::with_capacity(rows.len());
    let mut block_starts = Vec::new();
    let mut i = 0;
    while i < rows.len() {
        let fluid = rows[i].fluid.clone();
        let end = i + rows[i..].iter().take_while(|r| r.fluid == fluid).count();
        let block = &rows[i..end];
        let best_iou = block
            .iter()
            .map(|r| r.iou)
            .fold(f64::NEG_INFINITY, f64::max);
        let best_f1 = block.iter().map(|r| r.f1).fold(f64::NEG_INFINITY, f64::max);
        let mark = |v: f64, best: f64| {
            if block.len() > 1 && v == best {
                "*"
            } else {
                ""
            }
        };
        block_starts.push(cells.len());
        for (k, r) in block.iter().enumerate() {
            cells.push([
                if k == 0 { fluid.clone() } else { String::new() },
                model_label(&r.model).to_string(),
                format!("{:.4}{}", r.iou, mark(r.iou, best_iou)),
                format!("{:.4}{}", r.f1, mark(r.f1, best_f1)),
            ]);
        }
        i = end;
    }
    let widths: Vec<usize> = (0..4)
        .map(|c| {
            cells
                .iter()
                .map(|row| row[c].len())
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |fields: [&str; 4]| -> String {
        let mut s = String::new();
        for (c, f) in fields.iter().enumerate() {
            if c > 0 {
                s.push_str("  ");
            }
            let _ = write!(s, "{f:<w$}", w = widths[c]);
        }
        s.trim_end().to_string()
    };
    let mut out = String::new();
    out.push_str(&line(header));
    out.push('\n');
    let rules: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    out.push_str(&line([&rules[0], &rules[1], &rules[2], &rules[3]]));
    out.push('\n');
    for (idx, row) in cells.iter().enumerate() {
        if idx > 0 && block_starts.contains(&idx) {
            out.push('\n');
        }
        out.push_str(&line([&row[0], &row[1], &row[2], &row[3]]));
        out.push('\n');
    }
    out.push_str("\n* best score for the fluid\n");
    out
}

/// Five-number summary with Tukey whiskers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoxStats {
    pub fluid: String,
    pub model: String,
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    #[serde(skip)]
    pub outliers: Vec<f64>,
}

/// Linearly interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn box_stats(fluid: &str, model: &str, values: &[f64]) -> Option<BoxStats> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let (q1, median, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside: Vec<f64> = v
        .iter()
        .copied()
        .filter(|x| (lo_fence..=hi_fence).contains(x))
        .collect();
    Some(BoxStats {
        fluid: fluid.to_string(),
        model: model.to_string(),
        n: v.len(),
        min: v[0],
        q1,
        median,
        q3,
        max: v[v.len() - 1],
        whisker_low: inside.first().copied().unwrap_or(q1),
        whisker_high: inside.last().copied().unwrap_or(q3),
        outliers: v
            .iter()
            .copied()
            .filter(|x| !(lo_fence..=hi_fence).contains(x))
            .collect(),
    })
}

const PALETTE: [&str; 4] = ["#4c72b0", "#dd8452", "#55a868", "#8172b3"];

/// SVG box plot of one metric, boxes grouped by fluid.
pub fn render_boxplot(metric_label: &str, boxes: &[BoxStats]) -> String {
    let (left, top, plot_h, slot) = (60.0, 40.0, 240.0, 56.0);
    let width = left + 20.0 + slot * boxes.len().max(1) as f64;
    let height = top + plot_h + 70.0;
    let y = |v: f64| top + plot_h * (1.0 - v.clamp(0.0, 1.0));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{metric_label} per frame</text>"#,
        width / 2.0
    );
    for t in 0..=5 {
        let v = t as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left:.1}" y1="{yy:.1}" x2="{:.1}" y2="{yy:.1}" stroke="#dddddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"##,
            width - 10.0,
            left - 6.0,
            y(v) + 4.0,
            yy = y(v)
        );
    }
    let models: Vec<&str> = {
        let mut m: Vec<&str> = boxes.iter().map(|b| b.model.as_str()).collect();
        m.sort_by_key(|k| model_rank(k));
        m.dedup();
        m
    };
    for (i, b) in boxes.iter().enumerate() {
        let color = PALETTE[models.iter().position(|&m| m == b.model).unwrap_or(0) % PALETTE.len()];
        let cx = left + slot * (i as f64 + 0.5);
        let half = slot * 0.3;
        let _ = writeln!(
            s,
            r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#,
            y(b.whisker_high),
            y(b.whisker_low)
        );
        for w in [b.whisker_low, b.whisker_high] {
            let _ = writeln!(
                s,
                r#"<line x1="{:.1}" y1="{yy:.1}" x2="{:.1}" y2="{yy:.1}" stroke="black"/>"#,
                cx - half / 2.0,
                cx + half / 2.0,
                yy = y(w)
            );
        }
        let _ = writeln!(
            s,
            r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{color}" fill-opacity="0.7" stroke="black"/>"#,
            cx - half,
            y(b.q3),
            2.0 * half,
            (y(b.q1) - y(b.q3)).max(0.5)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{yy:.1}" x2="{:.1}" y2="{yy:.1}" stroke="black" stroke-width="2"/>"#,
            cx - half,
            cx + half,
            yy = y(b.median)
        );
        for o in &b.outliers {
            let _ = writeln!(
                s,
                r#"<circle cx="{cx:.1}" cy="{:.1}" r="2" fill="none" stroke="black"/>"#,
                y(*o)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text><text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            top + plot_h + 16.0,
            b.fluid,
            top + plot_h + 30.0,
            model_label(&b.model)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Files written by [`report`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportOutputs {
    pub table: PathBuf,
    pub plots: Vec<PathBuf>,
}

/// Renders the table and, where per-frame CSVs exist, IoU and F1 box plots.
/// Output depends only on the input files.
pub fn report(results_dir: &Path) -> Result<ReportOutputs> {
    let eval_dir = results_dir.join(EVAL_DIR);
    let rows = read_comparison_csv(&eval_dir.join(COMPARISON_FILE))?;
    let out_dir = results_dir.join(REPORTS_DIR);
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let table = out_dir.join(TABLE_FILE);
    fs::write(&table, render_table(&rows)).map_err(|e| Error::io(&table, e))?;

    let mut fluids: Vec<&str> = rows.iter().map(|r| r.fluid.as_str()).collect();
    fluids.sort_by_key(|f| fluid_rank(f));
    fluids.dedup();
    let mut frames: Vec<(String, Vec<ModelFrameRow>)> = Vec::new();
    for fluid in fluids {
        let path = eval_dir.join(fluid_csv_name(fluid));
        if path.is_file() {
            frames.push((fluid.to_string(), read_model_frames(&path)?));
        }
    }
    let mut plots = Vec::new();
    if !frames.is_empty() {
        for (metric, label) in [("iou", "IoU"), ("f1", "F1 Score")] {
            let mut boxes = Vec::new();
            for (fluid, list) in &frames {
                let mut models: Vec<&str> = list.iter().map(|r| r.model.as_str()).collect();
                models.sort_by_key(|m| model_rank(m));
                models.dedup();
                for model in models {
                    let values: Vec<f64> = list
                        .iter()
                        .filter(|r| r.model == model)
                        .filter_map(|r| r.score(metric))
                        .collect();
                    boxes.extend(box_stats(fluid, model, &values));
                }
            }
            let svg = out_dir.join(format!("boxplot_{metric}.svg"));
            fs::write(&svg, render_boxplot(label, &boxes)).map_err(|e| Error::io(&svg, e))?;
            write_rows(&out_dir.join(format!("boxplot_{metric}.csv")), &boxes)?;
            plots.push(svg);
        }
    }
    Ok(ReportOutputs { table, plots })
}
