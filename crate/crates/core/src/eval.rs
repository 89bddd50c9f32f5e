//! Confusion matrices and per-class precision, recall and F1.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::bundle::ModelBundle;
use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::label::{ClassLabel, NUM_CLASSES};

/// `counts[i][j]` = samples of true class `i` predicted as class `j`, in
/// canonical label order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn add(&mut self, truth: ClassLabel, predicted: ClassLabel) {
        self.counts[truth.index()][predicted.index()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn true_positives(&self, c: ClassLabel) -> u64 {
        self.counts[c.index()][c.index()]
    }

    /// Samples whose true class is `c` (row sum).
    pub fn support(&self, c: ClassLabel) -> u64 {
        self.counts[c.index()].iter().sum()
    }

    /// Samples predicted as `c` (column sum).
    pub fn predicted(&self, c: ClassLabel) -> u64 {
        self.counts.iter().map(|row| row[c.index()]).sum()
    }
}

/// Counts (truth, prediction) pairs.
pub fn confusion(predictions: &[ClassLabel], truths: &[ClassLabel]) -> Result<ConfusionMatrix> {
    if predictions.len() != truths.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in predictions.iter().zip(truths) {
        cm.add(t, p);
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ClassMetrics {
    /// Harmonic mean of precision and recall; 0 when both are 0.
    pub fn from_precision_recall(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        ClassMetrics { precision, recall, f1 }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Metrics per class, canonical order.
    pub per_class: BTreeMap<ClassLabel, ClassMetrics>,
    /// Unweighted means of the per-class values.
    pub macro_avg: ClassMetrics,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub samples: u64,
    pub bundle: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<PathBuf>,
}

/// Precision `TP/(TP+FP)`, recall `TP/(TP+FN)` and F1 per class. Any ratio
/// whose denominator is zero is reported as 0.
pub fn per_class_metrics(cm: &ConfusionMatrix) -> EvalReport {
    let per_class: BTreeMap<ClassLabel, ClassMetrics> = ClassLabel::ALL
        .into_iter()
        .map(|c| {
            let tp = cm.true_positives(c);
            (c, ClassMetrics::from_precision_recall(ratio(tp, cm.predicted(c)), ratio(tp, cm.support(c))))
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.values().map(f).sum::<f64>() / NUM_CLASSES as f64;
    let macro_avg = ClassMetrics {
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
    };
    let correct: u64 = ClassLabel::ALL.iter().map(|&c| cm.true_positives(c)).sum();
    EvalReport {
        per_class,
        macro_avg,
        accuracy: ratio(correct, cm.total()),
        confusion: *cm,
        samples: cm.total(),
        bundle: None,
        skipped: Vec::new(),
    }
}

impl EvalReport {
    pub fn metrics(&self, c: ClassLabel) -> ClassMetrics {
        self.per_class.get(&c).copied().unwrap_or_default()
    }

    /// Fixed-width table: one column per class plus the macro average, rows
    /// for precision, recall and F1, values at two decimals.
    pub fn to_table(&self) -> String {
        let mut header = format!("{:<10}", "Class");
        for c in ClassLabel::ALL {
            let name = c.name();
            let title = format!("{}{}", name[..1].to_uppercase(), &name[1..]);
            let _ = write!(header, " {title:>9}");
        }
        let _ = write!(header, " {:>9}", "Macro");
        let mut out = header;
        out.push('\n');
        let rows: [(&str, fn(&ClassMetrics) -> f64); 3] = [
            ("Precision", |m| m.precision),
            ("Recall", |m| m.recall),
            ("F1-score", |m| m.f1),
        ];
        for (name, get) in rows {
            let _ = write!(out, "{name:<10}");
            for m in self.per_class.values() {
                let _ = write!(out, " {:>9.2}", get(m));
            }
            let _ = writeln!(out, " {:>9.2}", get(&self.macro_avg));
        }
        out
    }
}

/// What to do when a test image cannot be read or decoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OnUnreadable {
    #[default]
    Abort,
    /// Log a warning, leave the image out and list it in the report.
    Skip,
}

/// Predicts every image of a labeled manifest with the bundle's model and
/// scores the predictions.
pub fn evaluate(bundle: &ModelBundle, manifest: &DatasetManifest, on_unreadable: OnUnreadable) -> Result<EvalReport> {
    const BATCH: usize = 16;
    let preprocess = bundle.preprocess();
    let mut predictions = Vec::with_capacity(manifest.len());
    let mut truths = Vec::with_capacity(manifest.len());
    let mut skipped = Vec::new();

    for chunk in manifest.records().chunks(BATCH) {
        let mut pixels = Vec::with_capacity(chunk.len());
        for r in chunk {
            let loaded = std::fs::read(&r.path)
                .map_err(|e| Error::io(&r.path, e))
                .and_then(|bytes| {
                    preprocess
                        .pixels_from_bytes(&bytes)
                        .map_err(|e| match e {
                            Error::Decode(msg) => Error::Decode(format!("{}: {msg}", r.path.display())),
                            e => e,
                        })
                });
            match (loaded, on_unreadable) {
                (Ok(px), _) => {
                    pixels.push(px);
                    truths.push(r.label);
                }
                (Err(e), OnUnreadable::Skip) => {
                    log::warn!("skipping unreadable image: {e}");
                    skipped.push(r.path.clone());
                }
                (Err(e), OnUnreadable::Abort) => return Err(e),
            }
        }
        if pixels.is_empty() {
            continue;
        }
        for scores in bundle.predict_pixels(pixels)? {
            predictions.push(scores.top_label());
        }
    }

    let cm = confusion(&predictions, &truths)?;
    let mut report = per_class_metrics(&cm);
    report.bundle = Some(bundle.identifier());
    report.skipped = skipped;
    Ok(report)
}
