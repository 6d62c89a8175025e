//! Overlay rendering of a detection record.

use std::path::Path;

use cmfd_core::keypoint::MatchSet;
use cmfd_core::{BBox, BinaryMask, RgbImage, ScoreMap};

use crate::detect::DetectionRecord;
use crate::error::Result;
use crate::io;

const BOX: [u8; 3] = [255, 220, 0];
const LINE: [u8; 3] = [0, 230, 255];
const CONTOUR: [u8; 3] = [255, 0, 255];

/// Image blended towards red by the score, selected boxes, match lines and
/// the final mask contour, drawn in that order.
pub fn overlay(
    image: &RgbImage,
    scores: &ScoreMap,
    boxes: &[BBox],
    matches: &MatchSet,
    mask: Option<&BinaryMask>,
) -> RgbImage {
    let (w, h) = (image.width(), image.height());
    let mut out = RgbImage::from_fn(w, h, |x, y| {
        let a = 0.6 * scores.get(x, y);
        let p = image.get(x, y);
        let mix = |c: u8, t: f64| ((1.0 - a) * c as f64 + a * t).round() as u8;
        [mix(p[0], 255.0), mix(p[1], 0.0), mix(p[2], 0.0)]
    });
    for b in boxes {
        for x in b.x1..b.x2 {
            out.put(x, b.y1, BOX);
            out.put(x, b.y2 - 1, BOX);
        }
        for y in b.y1..b.y2 {
            out.put(b.x1, y, BOX);
            out.put(b.x2 - 1, y, BOX);
        }
    }
    for l in &matches.lines {
        draw_line(&mut out, (l[0], l[1]), (l[2], l[3]), LINE);
    }
    if let Some(m) = mask {
        for y in 0..h {
            for x in 0..w {
                let edge = m.get(x, y)
                    && (x == 0 || y == 0 || x + 1 == w || y + 1 == h
                        || !m.get(x - 1, y)
                        || !m.get(x + 1, y)
                        || !m.get(x, y - 1)
                        || !m.get(x, y + 1));
                if edge {
                    out.put(x, y, CONTOUR);
                }
            }
        }
    }
    out
}

fn draw_line(img: &mut RgbImage, a: (usize, usize), b: (usize, usize), colour: [u8; 3]) {
    let (mut x, mut y) = (a.0 as i64, a.1 as i64);
    let (x1, y1) = (b.0 as i64, b.1 as i64);
    let (dx, dy) = ((x1 - x).abs(), -(y1 - y).abs());
    let (sx, sy) = (if x < x1 { 1 } else { -1 }, if y < y1 { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        if x >= 0 && y >= 0 && (x as usize) < img.width() && (y as usize) < img.height() {
            img.put(x as usize, y as usize, colour);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Renders the record at `record_path` into `out`.
pub fn render_record(record_path: &Path, out: &Path) -> Result<()> {
    let record: DetectionRecord = io::read_json(record_path)?;
    let dir = record_path.parent().unwrap_or(Path::new("."));
    let image = io::read_image(&dir.join(&record.image))?;
    let scores = io::read_scores(&dir.join(&record.scores))?;
    let matches = match &record.matches {
        Some(p) => io::read_json(&dir.join(p))?,
        None => MatchSet::default(),
    };
    let mask = record.mask.as_ref().map(|p| io::read_mask(&dir.join(p))).transpose()?;
    io::write_image(out, &overlay(&image, &scores, &record.boxes, &matches, mask.as_ref()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boxes_without_matches() {
        let img = RgbImage::from_fn(20, 10, |_, _| [10, 10, 10]);
        let b = BBox::new(2, 2, 8, 6).unwrap();
        let out = overlay(&img, &ScoreMap::zeros(20, 10), &[b], &MatchSet::default(), None);
        assert_eq!((out.width(), out.height()), (20, 10));
        assert_eq!(out.get(2, 2), BOX);
        assert_eq!(out.get(4, 4), [10, 10, 10]);
        let n = (0..10).flat_map(|y| (0..20).map(move |x| (x, y))).filter(|&(x, y)| out.get(x, y) == BOX).count();
        assert_eq!(n, 2 * 6 + 2 * 4 - 4);
    }

    #[test]
    fn line_endpoints_are_drawn() {
        let mut img = RgbImage::new(10, 10);
        draw_line(&mut img, (1, 8), (7, 2), LINE);
        assert_eq!(img.get(1, 8), LINE);
        assert_eq!(img.get(7, 2), LINE);
        assert_eq!(img.get(4, 5), LINE);
    }
}
