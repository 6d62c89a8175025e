//! Scoring predicted masks against a dataset manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cmfd_core::metrics::{self, AggregateReport, DetectedRule, MeanMetrics, PixelMetrics};
use cmfd_core::BinaryMask;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Manifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::io;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub id: String,
    /// False when the prediction was missing and scored as empty.
    pub present: bool,
    pub metrics: PixelMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub images: Vec<ImageRow>,
    pub aggregate: AggregateReport,
    pub missing: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvaluateOptions {
    pub split: Option<Split>,
    pub allow_missing: bool,
    pub rule: DetectedRule,
    /// Predicted positives needed to flag an image as forged.
    pub min_area: usize,
}

impl Default for EvaluateOptions {
    fn default() -> Self {
        Self {
            split: None,
            allow_missing: false,
            rule: DetectedRule::default(),
            min_area: 1,
        }
    }
}

/// `<dir>/<id>/mask.png` as written by `detect`, else `<dir>/<id>.png`.
pub fn prediction_path(dir: &Path, id: &str) -> PathBuf {
    let nested = dir.join(id).join("mask.png");
    if nested.exists() {
        nested
    } else {
        dir.join(format!("{id}.png"))
    }
}

pub fn evaluate(manifest: &Manifest, predictions: &Path, opts: &EvaluateOptions) -> Result<EvaluationReport> {
    let entries: Vec<&ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| opts.split.is_none_or(|s| e.split == s))
        .collect();
    if entries.is_empty() {
        return Err(Error::data(manifest.root.join(crate::dataset::MANIFEST), "no entries to evaluate"));
    }
    let scored: Vec<(ImageRow, bool, bool)> = entries
        .par_iter()
        .map(|e| {
            let gt = io::read_mask(&manifest.mask_path(e))?;
            let path = prediction_path(predictions, &e.id);
            let (pred, present) = if path.exists() {
                (io::read_mask(&path)?, true)
            } else if opts.allow_missing {
                (BinaryMask::new(gt.width(), gt.height()), false)
            } else {
                return Err(Error::data(&path, "prediction missing"));
            };
            if pred.width() != gt.width() || pred.height() != gt.height() {
                return Err(Error::data(&path, "prediction size differs from the ground truth"));
            }
            let m = metrics::pixel_metrics(&pred, &gt)?;
            let row = ImageRow {
                id: e.id.clone(),
                present,
                metrics: m,
            };
            Ok((row, metrics::image_flag(&pred, opts.min_area), !gt.is_empty()))
        })
        .collect::<Result<_>>()?;
    let per: Vec<PixelMetrics> = scored.iter().map(|(r, _, _)| r.metrics).collect();
    let mut aggregate = metrics::aggregate(&per, opts.rule)?;
    let flags: Vec<bool> = scored.iter().map(|s| s.1).collect();
    let labels: Vec<bool> = scored.iter().map(|s| s.2).collect();
    aggregate.image_level = Some(metrics::image_level_metrics(&flags, &labels)?);
    let missing = scored.iter().filter(|s| !s.0.present).map(|s| s.0.id.clone()).collect();
    Ok(EvaluationReport {
        images: scored.into_iter().map(|s| s.0).collect(),
        aggregate,
        missing,
    })
}

fn row(out: &mut String, name: &str, m: Option<&MeanMetrics>) {
    match m {
        Some(m) => writeln!(
            out,
            "{name:<20} {:>6} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            m.count, m.iou, m.precision, m.recall, m.f1
        ),
        None => writeln!(out, "{name:<20} {:>6} {:>9} {:>9} {:>9} {:>9}", 0, "n/a", "n/a", "n/a", "n/a"),
    }
    .expect("writing to a String");
}

/// Plain-text summary: one row per averaging protocol, then image level.
pub fn text_table(r: &EvaluationReport) -> String {
    let a = &r.aggregate;
    let mut out = String::new();
    writeln!(out, "{:<20} {:>6} {:>9} {:>9} {:>9} {:>9}", "protocol", "images", "IoU", "precision", "recall", "F1")
        .unwrap();
    row(&mut out, "all", Some(&a.protocol_all));
    row(&mut out, "detected", a.protocol_detected.as_ref());
    row(&mut out, "correctly-detected", a.correctly_detected.as_ref());
    writeln!(out, "detected rate (F1 > 0.5): {:.4}", a.detected_rate).unwrap();
    if let Some(il) = &a.image_level {
        writeln!(
            out,
            "image level: TPR {:.4}  FPR {:.4}  F1 {:.4}  (TP {} FP {} FN {} TN {})",
            il.tpr, il.fpr, il.f1, il.tp, il.fp, il.fn_, il.tn
        )
        .unwrap();
    }
    if !r.missing.is_empty() {
        writeln!(out, "missing predictions scored as empty: {}", r.missing.len()).unwrap();
    }
    out
}
