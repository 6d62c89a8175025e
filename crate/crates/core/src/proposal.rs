//! Score-driven proposal selection and a classical proposal generator.
//!
//! Selection runs in two phases. Phase 1 walks the proposals in order and
//! keeps those whose average score clears `s_t`, replacing a kept box when
//! the newcomer overlaps it strongly with a higher score, or growing a kept
//! box into the hull of both when one mostly contains the other. Phase 2
//! repeatedly merges kept boxes that still mostly contain one another until
//! the list stops shrinking.

use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::image::{RgbImage, ScoreMap};

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// Half-open pixel rectangle `[x1, x2) × [y1, y2)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "[usize; 4]", into = "[usize; 4]"))]
pub struct BBox {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

impl BBox {
    pub fn new(x1: usize, y1: usize, x2: usize, y2: usize) -> Result<Self> {
        if x1 >= x2 || y1 >= y2 {
            return Err(invalid!("degenerate box ({x1},{y1},{x2},{y2})"));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> usize {
        self.x2 - self.x1
    }

    pub fn height(&self) -> usize {
        self.y2 - self.y1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x1..self.x2).contains(&x) && (self.y1..self.y2).contains(&y)
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x2 <= width && self.y2 <= height
    }

    /// Grows the box by `pad` on every side, clipped to the image.
    pub fn padded(&self, pad: usize, width: usize, height: usize) -> BBox {
        BBox {
            x1: self.x1.saturating_sub(pad),
            y1: self.y1.saturating_sub(pad),
            x2: (self.x2 + pad).min(width),
            y2: (self.y2 + pad).min(height),
        }
    }

    pub fn diagonal(&self) -> f64 {
        crate::math::sqrt((self.width() * self.width() + self.height() * self.height()) as f64)
    }
}

impl TryFrom<[usize; 4]> for BBox {
    type Error = crate::Error;

    fn try_from(v: [usize; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [usize; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

/// Overlapping pixel count.
pub fn intersection_area(a: &BBox, b: &BBox) -> usize {
    let w = a.x2.min(b.x2).saturating_sub(a.x1.max(b.x1));
    let h = a.y2.min(b.y2).saturating_sub(a.y1.max(b.y1));
    w * h
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    if inter == 0 {
        return 0.0;
    }
    inter as f64 / (a.area() + b.area() - inter) as f64
}

/// Smallest box covering both inputs.
pub fn merge_boxes(a: &BBox, b: &BBox) -> BBox {
    BBox {
        x1: a.x1.min(b.x1),
        y1: a.y1.min(b.y1),
        x2: a.x2.max(b.x2),
        y2: a.y2.max(b.y2),
    }
}

/// Mean of `s` over the pixels of `b`.
pub fn avg_score(s: &ScoreMap, b: &BBox) -> Result<f64> {
    if !b.fits(s.width(), s.height()) {
        return Err(invalid!(
            "box {:?} exceeds the {}x{} score map",
            <[usize; 4]>::from(*b),
            s.width(),
            s.height()
        ));
    }
    let data = s.as_slice();
    let mut sum = 0.0;
    for y in b.y1..b.y2 {
        sum += data[y * s.width() + b.x1..y * s.width() + b.x2].iter().sum::<f64>();
    }
    Ok(sum / b.area() as f64)
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SelectionParams {
    pub s_t: f64,
    pub iou_t: f64,
    pub inter_t: f64,
    /// Boxes must cover strictly less than this fraction of the image.
    pub max_area_fraction: f64,
}

impl Default for SelectionParams {
    fn default() -> Self {
        Self {
            s_t: 0.4,
            iou_t: 0.5,
            inter_t: 0.8,
            max_area_fraction: 0.5,
        }
    }
}

impl SelectionParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("s_t", self.s_t),
            ("iou_t", self.iou_t),
            ("inter_t", self.inter_t),
            ("max_area_fraction", self.max_area_fraction),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(invalid!("{name} must lie in (0, 1], got {v}"));
            }
        }
        Ok(())
    }
}

/// Output of [`select_proposals_traced`].
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionTrace {
    pub boxes: Vec<BBox>,
    /// Phase-1 survivors before any phase-2 merging.
    pub phase1: Vec<BBox>,
    /// Number of phase-2 sweeps, including the final one that changed nothing.
    pub sweeps: usize,
    /// Output boxes that were kept by the higher-intersection-rate fallback
    /// rather than on score.
    pub fallback: Vec<BBox>,
}

/// Selects a handful of suspected boxes from `proposals` using the score map.
pub fn select_proposals(s: &ScoreMap, proposals: &[BBox], params: &SelectionParams) -> Result<Vec<BBox>> {
    Ok(select_proposals_traced(s, proposals, params)?.boxes)
}

pub fn select_proposals_traced(
    s: &ScoreMap,
    proposals: &[BBox],
    params: &SelectionParams,
) -> Result<SelectionTrace> {
    params.validate()?;
    let limit = params.max_area_fraction * (s.width() * s.height()) as f64;
    let small = |b: &BBox| (b.area() as f64) < limit;
    let rate_hit = |inter: usize, a: &BBox, b: &BBox| {
        inter as f64 / a.area() as f64 > params.inter_t || inter as f64 / b.area() as f64 > params.inter_t
    };

    let mut kept: Vec<BBox> = Vec::new();
    let mut kept_scores: Vec<f64> = Vec::new();
    for p in proposals {
        let sp = avg_score(s, p)?;
        if !small(p) || sp <= params.s_t {
            continue;
        }
        let mut fresh = true;
        for i in 0..kept.len() {
            let q = kept[i];
            if iou(&q, p) > params.iou_t && sp > kept_scores[i] {
                kept[i] = *p;
                kept_scores[i] = sp;
                fresh = false;
                break;
            }
            let inter = intersection_area(&q, p);
            if rate_hit(inter, p, &q) {
                let m = merge_boxes(p, &q);
                let sm = avg_score(s, &m)?;
                if sm > params.s_t && small(&m) {
                    kept[i] = m;
                    kept_scores[i] = sm;
                    fresh = false;
                    break;
                }
            }
        }
        if fresh {
            kept.push(*p);
            kept_scores.push(sp);
        }
    }

    let phase1 = kept.clone();
    let mut sweeps = 0;
    let mut fallback = Vec::new();
    loop {
        sweeps += 1;
        let mut next = Vec::with_capacity(kept.len());
        let mut next_fallback = Vec::new();
        let mut consumed = alloc::vec![false; kept.len()];
        for i in 0..kept.len() {
            if consumed[i] {
                continue;
            }
            let a = kept[i];
            let partner = (i + 1..kept.len())
                .filter(|&j| !consumed[j])
                .map(|j| (j, intersection_area(&a, &kept[j])))
                .find(|&(j, inter)| rate_hit(inter, &a, &kept[j]));
            match partner {
                Some((j, inter)) => {
                    let b = kept[j];
                    consumed[i] = true;
                    consumed[j] = true;
                    let m = merge_boxes(&a, &b);
                    if avg_score(s, &m)? > params.s_t && small(&m) {
                        next.push(m);
                    } else {
                        let keep = if inter as f64 / b.area() as f64 > inter as f64 / a.area() as f64 {
                            b
                        } else {
                            a
                        };
                        next.push(keep);
                        next_fallback.push(keep);
                    }
                }
                None => next.push(a),
            }
        }
        let stable = next.len() == kept.len();
        fallback.extend(next_fallback);
        kept = next;
        if stable {
            break;
        }
    }
    fallback.retain(|f| kept.contains(f));
    fallback.dedup();
    Ok(SelectionTrace {
        boxes: kept,
        phase1,
        sweeps,
        fallback,
    })
}

/// Source of candidate boxes for an image.
pub trait ProposalGenerator {
    fn name(&self) -> &str;
    fn propose(&self, image: &RgbImage) -> Vec<BBox>;
}

/// Sliding boxes scored by enclosed edge mass: Sobel magnitude inside the
/// box in excess of what the surrounding ring's density predicts, divided by
/// `perimeter^1.5`. Boxes that wrap a closed contour on a calmer background
/// rank first.
#[derive(Clone, Debug)]
pub struct EdgeBoxGenerator {
    pub max_proposals: usize,
    /// Box sides as fractions of the shorter image side.
    pub scales: Vec<f64>,
    /// Width/height ratios.
    pub aspects: Vec<f64>,
    pub nms_iou: f64,
}

impl Default for EdgeBoxGenerator {
    fn default() -> Self {
        Self {
            max_proposals: 1000,
            scales: alloc::vec![0.08, 0.12, 0.17, 0.24, 0.33, 0.45],
            aspects: alloc::vec![1.0, 2.0, 0.5],
            nms_iou: 0.7,
        }
    }
}

struct Integral {
    w: usize,
    sums: Vec<f64>,
}

impl Integral {
    fn new(values: &[f64], w: usize, h: usize) -> Self {
        let mut sums = alloc::vec![0.0; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += values[y * w + x];
                sums[(y + 1) * (w + 1) + x + 1] = sums[y * (w + 1) + x + 1] + row;
            }
        }
        Self { w, sums }
    }

    fn sum(&self, b: &BBox) -> f64 {
        let s = |x: usize, y: usize| self.sums[y * (self.w + 1) + x];
        s(b.x2, b.y2) - s(b.x1, b.y2) - s(b.x2, b.y1) + s(b.x1, b.y1)
    }
}

/// Sobel gradient magnitude of a grayscale image.
pub(crate) fn sobel_magnitude(gray: &[f64], w: usize, h: usize) -> Vec<f64> {
    let at = |x: isize, y: isize| {
        let x = x.clamp(0, w as isize - 1) as usize;
        let y = y.clamp(0, h as isize - 1) as usize;
        gray[y * w + x]
    };
    let mut out = alloc::vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x - 1, y)
                - at(x - 1, y + 1);
            let gy = at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x, y - 1)
                - at(x + 1, y - 1);
            out[y as usize * w + x as usize] = crate::math::sqrt(gx * gx + gy * gy);
        }
    }
    out
}

impl ProposalGenerator for EdgeBoxGenerator {
    fn name(&self) -> &str {
        "edgebox"
    }

    fn propose(&self, image: &RgbImage) -> Vec<BBox> {
        let (w, h) = (image.width(), image.height());
        if w < 4 || h < 4 {
            return Vec::new();
        }
        let edges = sobel_magnitude(&image.to_gray(), w, h);
        let integral = Integral::new(&edges, w, h);
        let base = w.min(h) as f64;
        let mut scored: Vec<(f64, BBox)> = Vec::new();
        for &scale in &self.scales {
            for &aspect in &self.aspects {
                let bw = ((base * scale * crate::math::sqrt(aspect)) as usize).clamp(2, w);
                let bh = ((base * scale / crate::math::sqrt(aspect)) as usize).clamp(2, h);
                let (sx, sy) = ((bw / 4).max(1), (bh / 4).max(1));
                let mut y = 0;
                while y + bh <= h {
                    let mut x = 0;
                    while x + bw <= w {
                        let b = BBox {
                            x1: x,
                            y1: y,
                            x2: x + bw,
                            y2: y + bh,
                        };
                        let ring = b.padded((bw.min(bh) / 4).max(1), w, h);
                        let inside = integral.sum(&b);
                        let ring_area = (ring.area() - b.area()).max(1) as f64;
                        let expected = (integral.sum(&ring) - inside) / ring_area * b.area() as f64;
                        let perimeter = 2.0 * (bw + bh) as f64;
                        let score = (inside - expected) / (perimeter * crate::math::sqrt(perimeter));
                        scored.push((score, b));
                        x += sx;
                    }
                    y += sy;
                }
            }
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut out: Vec<BBox> = Vec::new();
        for (_, b) in scored {
            if out.len() >= self.max_proposals {
                break;
            }
            if out.iter().all(|o| iou(o, &b) <= self.nms_iou) {
                out.push(b);
            }
        }
        out
    }
}
