//! Confusion matrices and the precision / recall / F1 / accuracy suite.
//!
//! Rows are true classes, columns are predicted classes. Every artifact
//! carries that orientation string.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{colormap_rgb, write_png};

pub const ORIENTATION: &str = "rows=true,cols=predicted";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    labels: Vec<String>,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(labels: Vec<String>) -> Self {
        let c = labels.len();
        Self {
            labels,
            counts: vec![vec![0; c]; c],
        }
    }

    pub fn from_counts(labels: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        if counts.len() != labels.len() || counts.iter().any(|r| r.len() != labels.len()) {
            return Err(Error::InvalidArgument(format!(
                "confusion counts must be {0}×{0}",
                labels.len()
            )));
        }
        Ok(Self { labels, counts })
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.labels.len() {
            return Err(Error::LabelMap(format!(
                "{} labels for a {}-class matrix",
                labels.len(),
                self.labels.len()
            )));
        }
        self.labels = labels;
        Ok(self)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }
}

fn default_labels(classes: usize) -> Vec<String> {
    (0..classes).map(|c| c.to_string()).collect()
}

/// Tallies `(true, predicted)` pairs into a `classes×classes` matrix.
pub fn confusion_matrix(true_labels: &[usize], predicted: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if true_labels.len() != predicted.len() {
        return Err(Error::InvalidArgument(format!(
            "{} true labels vs {} predictions",
            true_labels.len(),
            predicted.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(default_labels(classes));
    for (&t, &p) in true_labels.iter().zip(predicted) {
        for label in [t, p] {
            if label >= classes {
                return Err(Error::LabelOutOfRange { label, classes });
            }
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

/// `TP / (TP + FP)`; 0 when nothing was predicted for the class.
pub fn precision(tp: u64, fp: u64) -> f64 {
    ratio(tp, tp + fp)
}

/// `TP / (TP + FN)`; 0 when the class has no support.
pub fn recall(tp: u64, fn_: u64) -> f64 {
    ratio(tp, tp + fn_)
}

/// `(TP + TN) / (TP + TN + FP + FN)`.
pub fn accuracy(tp: u64, tn: u64, fp: u64, fn_: u64) -> f64 {
    ratio(tp + tn, tp + tn + fp + fn_)
}

/// Harmonic mean `2·P·R / (P + R)`; 0 when `P + R = 0`.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    let denom = precision + recall;
    if denom > 0.0 {
        2.0 * precision * recall / denom
    } else {
        0.0
    }
}

fn ratio(num: u64, denom: u64) -> f64 {
    if denom == 0 {
        0.0
    } else {
        num as f64 / denom as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassFlags {
    /// `TP + FP = 0`: precision reported as 0.
    pub no_predictions: bool,
    /// `TP + FN = 0`: recall reported as 0; normalized row is all zeros.
    pub no_support: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub support: u64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub flags: ClassFlags,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub orientation: String,
    pub total: u64,
    /// Overall top-1 accuracy, `trace / total`.
    pub accuracy: f64,
    /// Unweighted mean over classes (headline aggregate).
    #[serde(rename = "macro")]
    pub macro_avg: Averages,
    /// From pooled one-vs-rest counts.
    #[serde(rename = "micro")]
    pub micro_avg: Averages,
    pub per_class: Vec<ClassMetrics>,
}

/// One-vs-rest counts per class, then the metric equations per class,
/// macro means and micro (pooled) aggregates.
pub fn per_class_metrics(cm: &ConfusionMatrix) -> MetricsReport {
    let c = cm.num_classes();
    let total = cm.total();
    let mut per_class = Vec::with_capacity(c);
    let (mut tp_sum, mut fp_sum, mut fn_sum) = (0, 0, 0);
    for k in 0..c {
        let tp = cm.get(k, k);
        let support: u64 = cm.counts[k].iter().sum();
        let predicted: u64 = (0..c).map(|t| cm.get(t, k)).sum();
        let fn_ = support - tp;
        let fp = predicted - tp;
        let tn = total - tp - fp - fn_;
        let p = precision(tp, fp);
        let r = recall(tp, fn_);
        tp_sum += tp;
        fp_sum += fp;
        fn_sum += fn_;
        per_class.push(ClassMetrics {
            label: cm.labels[k].clone(),
            support,
            tp,
            fp,
            fn_,
            tn,
            precision: p,
            recall: r,
            f1: f1_score(p, r),
            accuracy: accuracy(tp, tn, fp, fn_),
            flags: ClassFlags {
                no_predictions: tp + fp == 0,
                no_support: tp + fn_ == 0,
            },
        });
    }
    let mean = |f: fn(&ClassMetrics) -> f64| {
        if c == 0 {
            0.0
        } else {
            per_class.iter().map(f).sum::<f64>() / c as f64
        }
    };
    let macro_avg = Averages {
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
    };
    let (mp, mr) = (precision(tp_sum, fp_sum), recall(tp_sum, fn_sum));
    MetricsReport {
        orientation: ORIENTATION.to_string(),
        total,
        accuracy: ratio(cm.trace(), total),
        macro_avg,
        micro_avg: Averages {
            precision: mp,
            recall: mr,
            f1: f1_score(mp, mr),
        },
        per_class,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedConfusion {
    pub rows: Vec<Vec<f64>>,
    /// Indices of all-zero rows (emitted as zeros).
    pub zero_rows: Vec<usize>,
}

/// Divides each row by its sum.
pub fn normalize_rows(cm: &ConfusionMatrix) -> NormalizedConfusion {
    let mut zero_rows = Vec::new();
    let rows = cm
        .counts
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let sum: u64 = row.iter().sum();
            if sum == 0 {
                zero_rows.push(i);
                vec![0.0; row.len()]
            } else {
                row.iter().map(|&v| v as f64 / sum as f64).collect()
            }
        })
        .collect();
    NormalizedConfusion { rows, zero_rows }
}

/// Geometry of the rendered confusion heatmap.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeatmapLayout {
    pub cell: u32,
    pub margin: u32,
}

impl Default for HeatmapLayout {
    fn default() -> Self {
        Self { cell: 32, margin: 8 }
    }
}

impl HeatmapLayout {
    pub fn side(&self, classes: usize) -> u32 {
        self.cell * classes as u32 + 2 * self.margin
    }
}

/// Paths written by [`write_report`].
#[derive(Clone, Debug)]
pub struct ReportFiles {
    pub metrics_json: PathBuf,
    pub confusion_csv: PathBuf,
    pub normalized_csv: PathBuf,
    pub heatmap_png: PathBuf,
}

/// Writes `metrics.json`, `confusion.csv`, `confusion_normalized.csv` and
/// `confusion.png` into `dir`.
pub fn write_report(report: &MetricsReport, cm: &ConfusionMatrix, dir: impl AsRef<Path>) -> Result<ReportFiles> {
    write_report_with(report, cm, dir, HeatmapLayout::default())
}

pub fn write_report_with(
    report: &MetricsReport,
    cm: &ConfusionMatrix,
    dir: impl AsRef<Path>,
    layout: HeatmapLayout,
) -> Result<ReportFiles> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = ReportFiles {
        metrics_json: dir.join("metrics.json"),
        confusion_csv: dir.join("confusion.csv"),
        normalized_csv: dir.join("confusion_normalized.csv"),
        heatmap_png: dir.join("confusion.png"),
    };

    let mut json = serde_json::to_string_pretty(report).map_err(|e| Error::Serde(e.to_string()))?;
    json.push('\n');
    fs::write(&files.metrics_json, json).map_err(|e| Error::io(&files.metrics_json, e))?;

    let counts: Vec<Vec<String>> = cm
        .counts
        .iter()
        .map(|r| r.iter().map(u64::to_string).collect())
        .collect();
    write_matrix_csv(&files.confusion_csv, cm.labels(), &counts)?;

    let norm = normalize_rows(cm);
    let cells: Vec<Vec<String>> = norm
        .rows
        .iter()
        .map(|r| r.iter().map(|v| format!("{v}")).collect())
        .collect();
    write_matrix_csv(&files.normalized_csv, cm.labels(), &cells)?;

    let c = cm.num_classes();
    let side = layout.side(c);
    let mut pixels = vec![255u8; (side * side * 3) as usize];
    for (i, row) in norm.rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let color = colormap_rgb(v);
            for dy in 0..layout.cell {
                for dx in 0..layout.cell {
                    let y = layout.margin + i as u32 * layout.cell + dy;
                    let x = layout.margin + j as u32 * layout.cell + dx;
                    let at = ((y * side + x) * 3) as usize;
                    pixels[at..at + 3].copy_from_slice(&color);
                }
            }
        }
    }
    write_png(
        &files.heatmap_png,
        side,
        side,
        true,
        &pixels,
        &[("orientation", ORIENTATION), ("labels", &cm.labels().join(","))],
    )?;
    Ok(files)
}

fn write_matrix_csv(path: &Path, labels: &[String], cells: &[Vec<String>]) -> Result<()> {
    let mut out = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let err = |e: csv::Error| Error::Serde(e.to_string());
        let mut header = vec![format!("true\\predicted ({ORIENTATION})")];
        header.extend(labels.iter().cloned());
        w.write_record(&header).map_err(err)?;
        for (label, row) in labels.iter().zip(cells) {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().cloned());
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: impl AsRef<Path>) -> Result<MetricsReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_single_column() {
        let cm = confusion_matrix(&[0, 1, 1, 2, 2, 2], &[0, 1, 1, 2, 2, 2], 3).unwrap();
        assert_eq!(cm.counts(), &[vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 3]]);
        let r = per_class_metrics(&cm);
        for m in &r.per_class {
            assert_eq!((m.precision, m.recall, m.f1, m.accuracy), (1.0, 1.0, 1.0, 1.0));
        }
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.macro_avg.f1, 1.0);

        let cm = confusion_matrix(&[0, 1, 2, 2], &[0, 0, 0, 0], 3).unwrap();
        for row in cm.counts() {
            assert_eq!(&row[1..], &[0, 0]);
        }
        let r = per_class_metrics(&cm);
        assert!(r.per_class[1].flags.no_predictions);
        assert_eq!(r.per_class[1].precision, 0.0);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            confusion_matrix(&[0, 3], &[0, 1], 3),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
        assert!(confusion_matrix(&[0], &[0, 1], 3).is_err());
    }

    #[test]
    fn hand_counted_three_class() {
        let cm =
            ConfusionMatrix::from_counts(default_labels(3), vec![vec![5, 1, 0], vec![0, 4, 2], vec![1, 0, 7]]).unwrap();
        let r = per_class_metrics(&cm);
        // class 0: TP 5, FP 1 (row 2), FN 1, TN 13
        let m = &r.per_class[0];
        assert_eq!((m.tp, m.fp, m.fn_, m.tn), (5, 1, 1, 13));
        assert!((m.precision - 5.0 / 6.0).abs() < 1e-12);
        assert!((m.recall - 5.0 / 6.0).abs() < 1e-12);
        assert!((m.f1 - 5.0 / 6.0).abs() < 1e-12);
        assert!((m.accuracy - 18.0 / 20.0).abs() < 1e-12);
        // class 1: TP 4, FP 1, FN 2, TN 13
        let m = &r.per_class[1];
        assert_eq!((m.tp, m.fp, m.fn_, m.tn), (4, 1, 2, 13));
        assert!((m.precision - 0.8).abs() < 1e-12);
        assert!((m.recall - 4.0 / 6.0).abs() < 1e-12);
        assert!((m.f1 - 8.0 / 11.0).abs() < 1e-12);
        // class 2: TP 7, FP 2, FN 1, TN 10
        let m = &r.per_class[2];
        assert_eq!((m.tp, m.fp, m.fn_, m.tn), (7, 2, 1, 10));
        assert!((m.precision - 7.0 / 9.0).abs() < 1e-12);
        assert!((m.recall - 7.0 / 8.0).abs() < 1e-12);
        assert!((m.f1 - 14.0 / 17.0).abs() < 1e-12);
        assert!((r.accuracy - 16.0 / 20.0).abs() < 1e-12);
        assert!((r.micro_avg.precision - 0.8).abs() < 1e-12);
        assert!((r.micro_avg.recall - 0.8).abs() < 1e-12);
    }

    #[test]
    fn published_f1_pairs() {
        assert!((f1_score(0.9343, 0.9704) - 0.9520).abs() <= 5e-5);
        assert!((f1_score(0.9132, 0.9429) - 0.9278).abs() <= 5e-5);
        assert_eq!(f1_score(0.0, 0.0), 0.0);
    }

    #[test]
    fn normalization() {
        let cm =
            ConfusionMatrix::from_counts(default_labels(3), vec![vec![3, 1, 0], vec![0, 0, 0], vec![0, 0, 5]]).unwrap();
        let n = normalize_rows(&cm);
        assert_eq!(n.rows[0], vec![0.75, 0.25, 0.0]);
        assert_eq!(n.rows[1], vec![0.0; 3]);
        assert_eq!(n.zero_rows, vec![1]);
        assert_eq!(n.rows[2], vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let cm = ConfusionMatrix::from_counts(
            vec!["Apidae".into(), "Braconidae".into(), "Vespidae".into()],
            vec![vec![5, 1, 0], vec![0, 4, 2], vec![1, 0, 7]],
        )
        .unwrap();
        let report = per_class_metrics(&cm);
        let layout = HeatmapLayout { cell: 10, margin: 3 };
        let files = write_report_with(&report, &cm, dir.path(), layout).unwrap();

        assert_eq!(read_report(&files.metrics_json).unwrap(), report);

        let mut rdr = csv::Reader::from_path(&files.confusion_csv).unwrap();
        for (i, row) in rdr.records().enumerate() {
            let row = row.unwrap();
            assert_eq!(&row[0], cm.labels()[i].as_str());
            for j in 0..3 {
                assert_eq!(row[j + 1].parse::<u64>().unwrap(), cm.get(i, j));
            }
        }

        let img = image::open(&files.heatmap_png).unwrap();
        assert_eq!((img.width(), img.height()), (36, 36));
    }
}
