//! Evaluation report emission: CSV tables plus SVG plots.
//!
//! Everything written here is a pure function of its inputs — no clocks, no
//! randomness, no hash iteration — so a fixed model and dataset always
//! produce byte-identical files. Plots are SVG because text output diffs
//! cleanly and cannot smuggle nondeterminism through a rasterizer.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::density::ModelHead;
use crate::error::Result;
use crate::metrics::ScoreSet;

/// Number of bins in the score histogram.
pub const HISTOGRAM_BINS: usize = 30;

/// One `metric_name,split,value` row for `metrics.csv`.
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub metric: String,
    pub split: String,
    pub value: f64,
}

impl MetricRow {
    pub fn new(metric: &str, split: &str, value: f64) -> Self {
        MetricRow {
            metric: metric.into(),
            split: split.into(),
            value,
        }
    }
}

/// Histogram of ID and OoD scores over a common set of bins.
#[derive(Debug, Clone)]
pub struct ScoreHistogram {
    /// Bin edges, `HISTOGRAM_BINS + 1` values, ascending.
    pub edges: Vec<f64>,
    pub id_counts: Vec<usize>,
    pub ood_counts: Vec<usize>,
}

/// Bins both samples of `scores` over their combined range. The final bin is
/// closed on the right so the maximum lands inside it and counts sum to the
/// sample sizes.
pub fn score_histogram(scores: &ScoreSet) -> ScoreHistogram {
    let all = scores.id_scores().iter().chain(scores.ood_scores().iter());
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in all {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo == hi {
        // Degenerate range: one symmetric unit interval around the value.
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    let edges: Vec<f64> = (0..=HISTOGRAM_BINS)
        .map(|i| lo + width * i as f64)
        .collect();
    let bin_of = |v: f64| -> usize {
        let idx = ((v - lo) / width) as usize;
        idx.min(HISTOGRAM_BINS - 1)
    };
    let mut id_counts = vec![0usize; HISTOGRAM_BINS];
    let mut ood_counts = vec![0usize; HISTOGRAM_BINS];
    for &v in scores.id_scores() {
        id_counts[bin_of(v)] += 1;
    }
    for &v in scores.ood_scores() {
        ood_counts[bin_of(v)] += 1;
    }
    ScoreHistogram {
        edges,
        id_counts,
        ood_counts,
    }
}

/// Writes `metrics.csv` (`metric_name,split,value`).
pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "metric_name,split,value")?;
    for row in rows {
        writeln!(out, "{},{},{}", row.metric, row.split, row.value)?;
    }
    out.flush()?;
    Ok(())
}

/// Writes `histogram.csv` (`bin_left,bin_right,id_count,ood_count`).
pub fn write_histogram_csv(path: &Path, hist: &ScoreHistogram) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "bin_left,bin_right,id_count,ood_count")?;
    for b in 0..hist.id_counts.len() {
        writeln!(
            out,
            "{},{},{},{}",
            hist.edges[b],
            hist.edges[b + 1],
            hist.id_counts[b],
            hist.ood_counts[b]
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Writes `priors.csv` (`class_id,prototype_index,prior`).
pub fn write_priors_csv(path: &Path, head: &ModelHead) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "class_id,prototype_index,prior")?;
    for mix in head.classes() {
        for (m, p) in mix.priors().iter().enumerate() {
            writeln!(out, "{},{},{}", mix.class_id(), m, p)?;
        }
    }
    out.flush()?;
    Ok(())
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 360.0;
const MARGIN: f64 = 42.0;

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" \
         viewBox=\"0 0 {SVG_W} {SVG_H}\">\n<rect width=\"{SVG_W}\" height=\"{SVG_H}\" \
         fill=\"white\"/>\n<text x=\"{MARGIN}\" y=\"22\" font-family=\"monospace\" \
         font-size=\"14\">{title}</text>\n"
    )
}

/// Overlaid ID/OoD score histogram as SVG text.
pub fn svg_score_histogram(hist: &ScoreHistogram) -> String {
    let mut s = svg_open("marginal density scores: in-distribution vs out-of-distribution");
    let max_count = hist
        .id_counts
        .iter()
        .chain(hist.ood_counts.iter())
        .copied()
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let plot_w = SVG_W - 2.0 * MARGIN;
    let plot_h = SVG_H - 2.0 * MARGIN;
    let bins = hist.id_counts.len() as f64;
    let bar_w = plot_w / bins;
    for (series, color) in [(&hist.id_counts, "#2b6cb0"), (&hist.ood_counts, "#c05621")] {
        for (b, &count) in series.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let h = plot_h * count as f64 / max_count;
            let x = MARGIN + bar_w * b as f64;
            let y = SVG_H - MARGIN - h;
            s.push_str(&format!(
                "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{bar_w:.2}\" height=\"{h:.2}\" \
                 fill=\"{color}\" fill-opacity=\"0.55\"/>\n"
            ));
        }
    }
    s.push_str(&format!(
        "<line x1=\"{MARGIN}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"black\"/>\n\
         <text x=\"{MARGIN}\" y=\"{ly}\" font-family=\"monospace\" font-size=\"11\" \
         fill=\"#2b6cb0\">ID</text>\n\
         <text x=\"{lx2}\" y=\"{ly}\" font-family=\"monospace\" font-size=\"11\" \
         fill=\"#c05621\">OoD</text>\n",
        y = SVG_H - MARGIN,
        x2 = SVG_W - MARGIN,
        ly = SVG_H - MARGIN + 16.0,
        lx2 = MARGIN + 30.0,
    ));
    s.push_str("</svg>\n");
    s
}

/// Per-class prototype prior bar chart as SVG text.
pub fn svg_priors(head: &ModelHead) -> String {
    let mut s = svg_open("prototype priors by class");
    let palette = ["#2b6cb0", "#c05621", "#2f855a", "#6b46c1", "#b83280", "#4a5568"];
    let c_total = head.num_classes();
    let m_total = head.num_components();
    let bars = (c_total * m_total) as f64;
    let plot_w = SVG_W - 2.0 * MARGIN;
    let plot_h = SVG_H - 2.0 * MARGIN;
    let slot_w = plot_w / bars;
    let max_prior = head
        .classes()
        .iter()
        .flat_map(|mix| mix.priors().iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    for (c, mix) in head.classes().iter().enumerate() {
        let color = palette[c % palette.len()];
        for (m, &p) in mix.priors().iter().enumerate() {
            let h = plot_h * p / max_prior;
            let x = MARGIN + slot_w * (c * m_total + m) as f64;
            let y = SVG_H - MARGIN - h;
            s.push_str(&format!(
                "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{w:.2}\" height=\"{h:.2}\" \
                 fill=\"{color}\"/>\n",
                w = slot_w * 0.85,
            ));
        }
        s.push_str(&format!(
            "<text x=\"{x:.2}\" y=\"{y}\" font-family=\"monospace\" font-size=\"11\" \
             fill=\"{color}\">c{c}</text>\n",
            x = MARGIN + slot_w * (c * m_total) as f64,
            y = SVG_H - MARGIN + 16.0,
        ));
    }
    s.push_str("</svg>\n");
    s
}

/// Emits the full report set into `dir`: `metrics.csv` always; histogram CSV
/// and SVG when scores are given; priors CSV and SVG when a head is given.
/// Returns the paths written.
pub fn emit_report(
    dir: &Path,
    rows: &[MetricRow],
    scores: Option<&ScoreSet>,
    head: Option<&ModelHead>,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let metrics_path = dir.join("metrics.csv");
    write_metrics_csv(&metrics_path, rows)?;
    written.push(metrics_path);
    if let Some(scores) = scores {
        let hist = score_histogram(scores);
        let hist_path = dir.join("histogram.csv");
        write_histogram_csv(&hist_path, &hist)?;
        written.push(hist_path);
        let svg_path = dir.join("score_hist.svg");
        std::fs::write(&svg_path, svg_score_histogram(&hist))?;
        written.push(svg_path);
    }
    if let Some(head) = head {
        let priors_path = dir.join("priors.csv");
        write_priors_csv(&priors_path, head)?;
        written.push(priors_path);
        let svg_path = dir.join("priors.svg");
        std::fs::write(&svg_path, svg_priors(head))?;
        written.push(svg_path);
    }
    Ok(written)
}
