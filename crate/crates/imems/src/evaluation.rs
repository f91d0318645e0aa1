//! Pixel-pooled evaluation: confusion matrices, per-class F-measures,
//! prediction overlays, and the results table.
//!
//! Counts pool over all pixels of all accumulated images (not per-image
//! averages), and all ratios are computed in `f64` from `u64` counts.

use ndarray::Array2;

use crate::embedding::{RgbImage, SegMap};
use crate::error::{Error, Result};

/// K x K confusion matrix; `counts[gt][pred]` pools pixels over every
/// accumulated image pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_labels: usize,
    counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_labels: usize) -> Result<Self> {
        if num_labels < 2 {
            return Err(Error::config(format!(
                "confusion matrix needs >= 2 labels, got {num_labels}"
            )));
        }
        Ok(ConfusionMatrix {
            num_labels,
            counts: Array2::zeros((num_labels, num_labels)),
        })
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[[gt, pred]]
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    pub fn accumulate(&mut self, gt: &SegMap, pred: &SegMap) -> Result<()> {
        if gt.width() != pred.width() || gt.height() != pred.height() {
            return Err(Error::shape(format!(
                "ground truth is {}x{} but prediction is {}x{}",
                gt.width(),
                gt.height(),
                pred.width(),
                pred.height()
            )));
        }
        if gt.num_labels() != self.num_labels || pred.num_labels() != self.num_labels {
            return Err(Error::LabelRange(format!(
                "expected {} labels, ground truth has {} and prediction has {}",
                self.num_labels,
                gt.num_labels(),
                pred.num_labels()
            )));
        }
        for (&g, &p) in gt.labels().iter().zip(pred.labels()) {
            self.counts[[g as usize, p as usize]] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_labels != self.num_labels {
            return Err(Error::shape(format!(
                "cannot merge a {}-label matrix into a {}-label one",
                other.num_labels, self.num_labels
            )));
        }
        self.counts += &other.counts;
        Ok(())
    }
}

/// Scores derived from one confusion matrix. `absent_classes` lists labels
/// with no ground-truth or predicted pixels; their F defaults to 1 and the
/// average should be read with that in mind.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub per_class_f: Vec<f64>,
    pub average_f: f64,
    pub absent_classes: Vec<usize>,
}

/// Accuracy = trace / total; per-class F = 2 TP / (2 TP + FP + FN);
/// average F is the unweighted mean over classes.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::config("confusion matrix has no accumulated pixels"));
    }
    let k = cm.num_labels;
    let mut trace = 0u64;
    let mut per_class_f = Vec::with_capacity(k);
    let mut absent_classes = Vec::new();
    for c in 0..k {
        let tp = cm.count(c, c);
        trace += tp;
        let mut fp = 0u64;
        let mut fn_ = 0u64;
        for o in 0..k {
            if o != c {
                fp += cm.count(o, c);
                fn_ += cm.count(c, o);
            }
        }
        if tp + fp + fn_ == 0 {
            absent_classes.push(c);
            per_class_f.push(1.0);
        } else {
            per_class_f.push(2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64));
        }
    }
    let average_f = per_class_f.iter().sum::<f64>() / k as f64;
    Ok(MetricsReport {
        accuracy: trace as f64 / total as f64,
        per_class_f,
        average_f,
        absent_classes,
    })
}

/// Default label colors: green, red, yellow, blue, pink, then evenly spaced
/// hues for any further classes.
pub fn default_palette(num_labels: usize) -> Vec<[u8; 3]> {
    const NAMED: [[u8; 3]; 5] = [
        [0, 200, 0],
        [220, 0, 0],
        [230, 220, 0],
        [0, 80, 230],
        [240, 120, 190],
    ];
    (0..num_labels)
        .map(|i| {
            if i < NAMED.len() {
                NAMED[i]
            } else {
                // Fallback: walk the hue circle at full saturation.
                let h = (i - NAMED.len()) as f64 * 360.0 / (num_labels - NAMED.len()) as f64;
                hsv_to_rgb(h, 0.7, 0.9)
            }
        })
        .collect()
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

/// Alpha-blend a colored label map over the source image:
/// out = (1 - alpha) * image + alpha * color[label].
pub fn render_overlay(
    image: &RgbImage,
    pred: &SegMap,
    palette: &[[u8; 3]],
    alpha: f64,
) -> Result<RgbImage> {
    if image.width() != pred.width() || image.height() != pred.height() {
        return Err(Error::shape(format!(
            "image is {}x{} but prediction is {}x{}",
            image.width(),
            image.height(),
            pred.width(),
            pred.height()
        )));
    }
    if palette.len() < pred.num_labels() {
        return Err(Error::config(format!(
            "palette has {} colors for {} labels",
            palette.len(),
            pred.num_labels()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!(
            "alpha must be in [0, 1], got {alpha}"
        )));
    }
    let mut data = Vec::with_capacity(image.data().len());
    for (i, &l) in pred.labels().iter().enumerate() {
        let color = palette[l as usize];
        for c in 0..3 {
            let src = f64::from(image.data()[3 * i + c]);
            let tint = f64::from(color[c]);
            data.push(((1.0 - alpha) * src + alpha * tint).round() as u8);
        }
    }
    RgbImage::new(image.width(), image.height(), data)
}

/// One labeled row of the results table.
#[derive(Debug, Clone)]
pub struct TableRow {
    pub method: String,
    pub report: MetricsReport,
}

/// Render rows as CSV with the fixed header
/// `method,f_<label0>,...,avg_f,accuracy`. Values use six decimals so equal
/// runs produce byte-identical files.
pub fn metrics_csv(rows: &[TableRow], label_names: Option<&[String]>, num_labels: usize) -> String {
    let mut out = String::from("method");
    for c in 0..num_labels {
        let name = label_names
            .map(|n| n[c].clone())
            .unwrap_or_else(|| c.to_string());
        out.push_str(&format!(",f_{name}"));
    }
    out.push_str(",avg_f,accuracy\n");
    for row in rows {
        out.push_str(&row.method);
        for f in &row.report.per_class_f {
            out.push_str(&format!(",{f:.6}"));
        }
        out.push_str(&format!(
            ",{:.6},{:.6}\n",
            row.report.average_f, row.report.accuracy
        ));
    }
    out
}

/// Column-wise mean of several reports (used for the cross-fold summary).
pub fn mean_report(reports: &[MetricsReport]) -> Result<MetricsReport> {
    if reports.is_empty() {
        return Err(Error::config("cannot average zero reports"));
    }
    let k = reports[0].per_class_f.len();
    if reports.iter().any(|r| r.per_class_f.len() != k) {
        return Err(Error::shape("reports disagree on class count".to_string()));
    }
    let n = reports.len() as f64;
    let per_class_f: Vec<f64> = (0..k)
        .map(|c| reports.iter().map(|r| r.per_class_f[c]).sum::<f64>() / n)
        .collect();
    Ok(MetricsReport {
        accuracy: reports.iter().map(|r| r.accuracy).sum::<f64>() / n,
        average_f: reports.iter().map(|r| r.average_f).sum::<f64>() / n,
        per_class_f,
        absent_classes: Vec::new(),
    })
}
