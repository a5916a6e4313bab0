//! Classification and calibration metrics.
//!
//! ECE uses `M` equal-width bins `I_m = ((m−1)/M, m/M]`, so a confidence of
//! exactly `m/M` lands in bin `m`. Empty bins contribute nothing.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bin count used when none is configured.
pub const DEFAULT_BINS: usize = 15;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no records")]
    Empty,
    #[error("bin count must be at least 1")]
    NoBins,
    #[error("record {index}: confidence {confidence} outside (0, 1]")]
    InvalidConfidence { index: usize, confidence: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub predicted: usize,
    pub truth: usize,
    /// Maximum posterior probability.
    pub confidence: f64,
}

impl PredictionRecord {
    pub fn new(predicted: usize, truth: usize, confidence: f64) -> Self {
        PredictionRecord {
            predicted,
            truth,
            confidence,
        }
    }

    pub fn is_correct(&self) -> bool {
        self.predicted == self.truth
    }

    /// Record from a posterior row; ties go to the lowest class index.
    pub fn from_posterior(posterior: &[f64], truth: usize) -> Self {
        let (predicted, confidence) = argmax(posterior);
        PredictionRecord {
            predicted,
            truth,
            confidence,
        }
    }
}

/// Index and value of the first maximum.
pub fn argmax(v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &x) in v.iter().enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// `None` for an empty bin.
    pub accuracy: Option<f64>,
    pub confidence: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: Vec<CalibrationBin>,
    pub n: usize,
    pub ece: f64,
    pub accuracy: f64,
    pub macro_f_score: f64,
}

/// Bin index (0-based) of `confidence` among `m` right-closed bins.
pub fn bin_index(confidence: f64, m: usize) -> usize {
    let mf = m as f64;
    let edge = |k: usize| k as f64 / mf;
    let mut k = ((confidence * mf).ceil() as usize).clamp(1, m);
    while k > 1 && confidence <= edge(k - 1) {
        k -= 1;
    }
    while k < m && confidence > edge(k) {
        k += 1;
    }
    k - 1
}

fn check_records(records: &[PredictionRecord]) -> Result<(), MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    for (index, r) in records.iter().enumerate() {
        if !(r.confidence > 0.0 && r.confidence <= 1.0) {
            return Err(MetricsError::InvalidConfidence {
                index,
                confidence: r.confidence,
            });
        }
    }
    Ok(())
}

/// Expected calibration error over `m` bins, with the full report.
pub fn ece(records: &[PredictionRecord], m: usize) -> Result<CalibrationReport, MetricsError> {
    if m == 0 {
        return Err(MetricsError::NoBins);
    }
    check_records(records)?;
    let n = records.len();
    let mut counts = vec![0usize; m];
    let mut correct = vec![0usize; m];
    let mut conf_sum = vec![0.0f64; m];
    for r in records {
        let b = bin_index(r.confidence, m);
        counts[b] += 1;
        correct[b] += usize::from(r.is_correct());
        conf_sum[b] += r.confidence;
    }
    let mut bins = Vec::with_capacity(m);
    let mut total = 0.0;
    for b in 0..m {
        let (acc, conf) = if counts[b] > 0 {
            let acc = correct[b] as f64 / counts[b] as f64;
            let conf = conf_sum[b] / counts[b] as f64;
            total += (counts[b] as f64 / n as f64) * (acc - conf).abs();
            (Some(acc), Some(conf))
        } else {
            (None, None)
        };
        bins.push(CalibrationBin {
            lower: b as f64 / m as f64,
            upper: (b + 1) as f64 / m as f64,
            count: counts[b],
            accuracy: acc,
            confidence: conf,
        });
    }
    Ok(CalibrationReport {
        bins,
        n,
        ece: total,
        accuracy: accuracy(records)?,
        macro_f_score: macro_f_score(records)?,
    })
}

pub fn accuracy(records: &[PredictionRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let hits = records.iter().filter(|r| r.is_correct()).count();
    Ok(hits as f64 / records.len() as f64)
}

/// Unweighted mean of per-class F1 over the classes present in the ground
/// truth. A class with `P + R = 0` scores 0.
pub fn macro_f_score(records: &[PredictionRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let k = records
        .iter()
        .map(|r| r.predicted.max(r.truth))
        .max()
        .unwrap_or(0)
        + 1;
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fn_ = vec![0usize; k];
    for r in records {
        if r.is_correct() {
            tp[r.truth] += 1;
        } else {
            fp[r.predicted] += 1;
            fn_[r.truth] += 1;
        }
    }
    let mut sum = 0.0;
    let mut present = 0;
    for c in 0..k {
        if tp[c] + fn_[c] == 0 {
            continue;
        }
        present += 1;
        let p = if tp[c] + fp[c] > 0 {
            tp[c] as f64 / (tp[c] + fp[c]) as f64
        } else {
            0.0
        };
        let r = tp[c] as f64 / (tp[c] + fn_[c]) as f64;
        if p + r > 0.0 {
            sum += 2.0 * p * r / (p + r);
        }
    }
    Ok(sum / present as f64)
}

// ---------------------------------------------------------------------------
// Reliability diagrams
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityRow {
    pub midpoint: f64,
    pub accuracy: Option<f64>,
    pub confidence: Option<f64>,
    /// `confidence − accuracy`
    pub gap: Option<f64>,
    pub count: usize,
}

pub fn reliability_diagram_data(report: &CalibrationReport) -> Vec<ReliabilityRow> {
    report
        .bins
        .iter()
        .map(|b| ReliabilityRow {
            midpoint: 0.5 * (b.lower + b.upper),
            accuracy: b.accuracy,
            confidence: b.confidence,
            gap: b.accuracy.zip(b.confidence).map(|(a, c)| c - a),
            count: b.count,
        })
        .collect()
}

const NULL: &str = "null";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| NULL.to_string(), |x| format!("{x}"))
}

pub const CALIBRATION_CSV_HEADER: &str = "bin,lower,upper,midpoint,count,accuracy,confidence,gap";

/// One row per bin, then a scalar footer. Empty bins carry `null`.
pub fn report_csv(report: &CalibrationReport) -> String {
    let mut s = String::from(CALIBRATION_CSV_HEADER);
    s.push('\n');
    for (i, row) in reliability_diagram_data(report).iter().enumerate() {
        let b = &report.bins[i];
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            i + 1,
            b.lower,
            b.upper,
            row.midpoint,
            row.count,
            opt(row.accuracy),
            opt(row.confidence),
            opt(row.gap)
        );
    }
    let _ = writeln!(s, "# n,{}", report.n);
    let _ = writeln!(s, "# ece,{}", report.ece);
    let _ = writeln!(s, "# accuracy,{}", report.accuracy);
    let _ = writeln!(s, "# macro_f_score,{}", report.macro_f_score);
    s
}

pub const SVG_WIDTH: u32 = 640;
pub const SVG_HEIGHT: u32 = 480;

/// Reliability diagram: accuracy bars, gap bars stacked to the mean
/// confidence, and the identity diagonal.
pub fn reliability_svg(report: &CalibrationReport, title: &str) -> String {
    let (w, h) = (SVG_WIDTH as f64, SVG_HEIGHT as f64);
    let (left, right, top, bottom) = (70.0, 20.0, 40.0, 60.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let x = |v: f64| left + v * pw;
    let y = |v: f64| top + (1.0 - v) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        w / 2.0,
        xml_escape(title)
    );
    for row in reliability_diagram_data(report) {
        let half = 0.5 / report.bins.len() as f64;
        let x0 = x(row.midpoint - half);
        let bw = x(row.midpoint + half) - x0;
        if let (Some(acc), Some(conf)) = (row.accuracy, row.confidence) {
            let _ = writeln!(
                s,
                r##"<rect class="acc" x="{x0:.2}" y="{:.2}" width="{bw:.2}" height="{:.2}" fill="#1f77b4" stroke="#0b3c5d"/>"##,
                y(acc),
                y(0.0) - y(acc)
            );
            let (lo, hi) = if conf >= acc {
                (acc, conf)
            } else {
                (conf, acc)
            };
            let _ = writeln!(
                s,
                r##"<rect class="gap" x="{x0:.2}" y="{:.2}" width="{bw:.2}" height="{:.2}" fill="#d62728" fill-opacity="0.35" stroke="#d62728"/>"##,
                y(hi),
                y(lo) - y(hi)
            );
        }
    }
    let _ = writeln!(
        s,
        r##"<line class="ideal" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#555" stroke-dasharray="6,4"/>"##,
        x(0.0),
        y(0.0),
        x(1.0),
        y(1.0)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">{v:.1}</text>"#,
            x(v),
            y(0.0) + 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{v:.1}</text>"#,
            x(0.0) - 6.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="13" text-anchor="middle">Confidence</text>"#,
        left + pw / 2.0,
        h - 18.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.2}" font-family="sans-serif" font-size="13" text-anchor="middle" transform="rotate(-90 18 {:.2})">Accuracy</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12">ECE = {:.4}</text>"#,
        left + 10.0,
        top + 18.0,
        report.ece
    );
    s.push_str("</svg>\n");
    s
}

pub(crate) fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
