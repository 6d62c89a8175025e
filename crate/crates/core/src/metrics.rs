//! Pixel-level and image-level evaluation.
//!
//! Zero-denominator conventions: an empty prediction on an empty ground
//! truth scores 1 everywhere; any other undefined ratio scores 0.

use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::image::BinaryMask;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct PixelMetrics {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PixelMetrics {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        if tp + fp + fn_ == 0 {
            return Self {
                tp,
                fp,
                fn_,
                tn,
                iou: 1.0,
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            };
        }
        Self {
            tp,
            fp,
            fn_,
            tn,
            iou: ratio(tp, tp + fp + fn_),
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
        }
    }

    /// Number of pixels predicted positive.
    pub fn predicted(&self) -> u64 {
        self.tp + self.fp
    }
}

pub fn pixel_metrics(pred: &BinaryMask, gt: &BinaryMask) -> Result<PixelMetrics> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(invalid!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        ));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        match (p != 0, g != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(PixelMetrics::from_counts(tp, fp, fn_, tn))
}

/// Which images count as detected for the Protocol-Detected average.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum DetectedRule {
    /// At least this many predicted positive pixels.
    MinPredicted(u64),
}

impl Default for DetectedRule {
    fn default() -> Self {
        DetectedRule::MinPredicted(1)
    }
}

impl DetectedRule {
    pub fn detected(&self, m: &PixelMetrics) -> bool {
        match *self {
            DetectedRule::MinPredicted(n) => m.predicted() >= n,
        }
    }
}

/// Mean pixel metrics over a subset of images.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct MeanMetrics {
    pub count: usize,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl MeanMetrics {
    fn of<'a>(items: impl Iterator<Item = &'a PixelMetrics>) -> Option<Self> {
        let mut m = MeanMetrics {
            count: 0,
            iou: 0.0,
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
        };
        for p in items {
            m.count += 1;
            m.iou += p.iou;
            m.precision += p.precision;
            m.recall += p.recall;
            m.f1 += p.f1;
        }
        if m.count == 0 {
            return None;
        }
        let n = m.count as f64;
        m.iou /= n;
        m.precision /= n;
        m.recall /= n;
        m.f1 /= n;
        Some(m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ImageLevelMetrics {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub tpr: f64,
    pub fpr: f64,
    pub f1: f64,
}

/// `None` marks an undefined average (empty subset).
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct AggregateReport {
    pub protocol_all: MeanMetrics,
    pub protocol_detected: Option<MeanMetrics>,
    /// Average over images with pixel F1 above 0.5.
    pub correctly_detected: Option<MeanMetrics>,
    /// Fraction of images with pixel F1 above 0.5.
    pub detected_rate: f64,
    pub image_level: Option<ImageLevelMetrics>,
}

/// F1 above which an image counts as correctly detected.
pub const CORRECT_F1: f64 = 0.5;

pub fn aggregate(per_image: &[PixelMetrics], rule: DetectedRule) -> Result<AggregateReport> {
    let protocol_all = MeanMetrics::of(per_image.iter()).ok_or_else(|| invalid!("no images to aggregate"))?;
    let protocol_detected = MeanMetrics::of(per_image.iter().filter(|m| rule.detected(m)));
    let correctly_detected = MeanMetrics::of(per_image.iter().filter(|m| m.f1 > CORRECT_F1));
    let detected_rate = correctly_detected.map_or(0, |m| m.count) as f64 / per_image.len() as f64;
    Ok(AggregateReport {
        protocol_all,
        protocol_detected,
        correctly_detected,
        detected_rate,
        image_level: None,
    })
}

/// Whether a predicted mask flags its image as forged.
pub fn image_flag(mask: &BinaryMask, min_area: usize) -> bool {
    mask.count() >= min_area.max(1)
}

pub fn image_level_metrics(predictions: &[bool], labels: &[bool]) -> Result<ImageLevelMetrics> {
    if predictions.len() != labels.len() {
        return Err(invalid!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        ));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok(ImageLevelMetrics {
        tp,
        fp,
        fn_,
        tn,
        tpr: ratio(tp, tp + fn_),
        fpr: ratio(fp, tn + fp),
        f1: ratio(2 * tp, 2 * tp + fp + fn_),
    })
}

/// Collects the image-level flags of `masks`.
pub fn image_flags(masks: &[BinaryMask], min_area: usize) -> Vec<bool> {
    masks.iter().map(|m| image_flag(m, min_area)).collect()
}
