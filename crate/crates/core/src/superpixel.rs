//! Superpixel segmentation.
//!
//! [`Slic`] is the built-in segmenter: k-means in CIELAB + position space,
//! seeded on a regular grid, each centre searching a `2S × 2S` window, then
//! a connectivity pass that absorbs fragments into a neighbour.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::image::RgbImage;
use crate::math;

/// A partition of the image into `count` labelled regions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperpixelLabels {
    width: usize,
    height: usize,
    labels: Vec<u32>,
    count: usize,
}

impl SuperpixelLabels {
    /// Checks that labels are dense in `0..count` and every label is used.
    pub fn new(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(invalid!("label map has {} entries for {width}x{height}", labels.len()));
        }
        let count = labels.iter().max().map_or(0, |&m| m as usize + 1);
        let mut used = vec![false; count];
        for &l in &labels {
            used[l as usize] = true;
        }
        if used.iter().any(|u| !u) {
            return Err(invalid!("label map skips some labels below {count}"));
        }
        Ok(Self {
            width,
            height,
            labels,
            count,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.labels
    }

    /// Pixel count of every region.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }
}

pub trait Segmenter {
    fn name(&self) -> &str;
    fn segment(&self, image: &RgbImage, target_regions: usize) -> Result<SuperpixelLabels>;
}

#[derive(Clone, Debug)]
pub struct Slic {
    /// Weight of spatial distance against colour distance.
    pub compactness: f64,
    pub iterations: usize,
}

impl Default for Slic {
    fn default() -> Self {
        Self {
            compactness: 10.0,
            iterations: 10,
        }
    }
}

/// Default region count for a 512×512 image.
pub const DEFAULT_REGIONS: usize = 512;

/// Segments with the built-in [`Slic`] segmenter.
pub fn superpixel_segment(image: &RgbImage, target_regions: usize) -> Result<SuperpixelLabels> {
    Slic::default().segment(image, target_regions)
}

fn srgb_to_lab(px: [u8; 3]) -> [f64; 3] {
    let lin = |c: u8| {
        let c = c as f64 / 255.0;
        if c <= 0.04045 {
            c / 12.92
        } else {
            math::powf((c + 0.055) / 1.055, 2.4)
        }
    };
    let (r, g, b) = (lin(px[0]), lin(px[1]), lin(px[2]));
    let x = (0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b) / 0.950_47;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175 * b;
    let z = (0.019_333_9 * r + 0.119_192 * g + 0.950_304_1 * b) / 1.088_83;
    let f = |t: f64| {
        if t > 216.0 / 24389.0 {
            math::cbrt(t)
        } else {
            (24389.0 / 27.0 * t + 16.0) / 116.0
        }
    };
    let (fx, fy, fz) = (f(x), f(y), f(z));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

fn sq(v: f64) -> f64 {
    v * v
}

#[derive(Clone, Copy)]
struct Center {
    lab: [f64; 3],
    x: f64,
    y: f64,
}

impl Segmenter for Slic {
    fn name(&self) -> &str {
        "slic"
    }

    fn segment(&self, image: &RgbImage, target_regions: usize) -> Result<SuperpixelLabels> {
        let (w, h) = (image.width(), image.height());
        let n = w * h;
        if target_regions == 0 {
            return Err(invalid!("target region count must be positive"));
        }
        if target_regions > n {
            return Err(invalid!("{target_regions} regions requested for {n} pixels"));
        }
        if target_regions == 1 {
            return SuperpixelLabels::new(w, h, vec![0; n]);
        }
        let lab: Vec<[f64; 3]> = image.as_raw().chunks_exact(3).map(|p| srgb_to_lab([p[0], p[1], p[2]])).collect();
        let step = math::sqrt(n as f64 / target_regions as f64);
        let nx = (math::round(w as f64 / step) as usize).clamp(1, w);
        let ny = (math::round(h as f64 / step) as usize).clamp(1, h);
        let mut centers = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let x = ((i as f64 + 0.5) * w as f64 / nx as f64) as usize;
                let y = ((j as f64 + 0.5) * h as f64 / ny as f64) as usize;
                centers.push(Center {
                    lab: lab[y * w + x],
                    x: x as f64,
                    y: y as f64,
                });
            }
        }
        let spatial = (self.compactness / step) * (self.compactness / step);
        let radius = math::ceil(step) as isize;
        let mut labels = vec![u32::MAX; n];
        let mut dist = vec![f64::INFINITY; n];
        for _ in 0..self.iterations.max(1) {
            dist.iter_mut().for_each(|d| *d = f64::INFINITY);
            for (k, c) in centers.iter().enumerate() {
                let (cx, cy) = (c.x as isize, c.y as isize);
                let y0 = (cy - radius).max(0) as usize;
                let y1 = ((cy + radius + 1) as usize).min(h);
                let x0 = (cx - radius).max(0) as usize;
                let x1 = ((cx + radius + 1) as usize).min(w);
                for y in y0..y1 {
                    for x in x0..x1 {
                        let p = lab[y * w + x];
                        let dc = sq(p[0] - c.lab[0]) + sq(p[1] - c.lab[1]) + sq(p[2] - c.lab[2]);
                        let ds = sq(x as f64 - c.x) + sq(y as f64 - c.y);
                        let d = dc + ds * spatial;
                        let i = y * w + x;
                        if d < dist[i] {
                            dist[i] = d;
                            labels[i] = k as u32;
                        }
                    }
                }
            }
            let mut acc = vec![[0.0f64; 6]; centers.len()];
            for (i, &l) in labels.iter().enumerate() {
                if l == u32::MAX {
                    continue;
                }
                let a = &mut acc[l as usize];
                let p = lab[i];
                a[0] += p[0];
                a[1] += p[1];
                a[2] += p[2];
                a[3] += (i % w) as f64;
                a[4] += (i / w) as f64;
                a[5] += 1.0;
            }
            for (c, a) in centers.iter_mut().zip(&acc) {
                if a[5] > 0.0 {
                    c.lab = [a[0] / a[5], a[1] / a[5], a[2] / a[5]];
                    c.x = a[3] / a[5];
                    c.y = a[4] / a[5];
                }
            }
        }
        // Pixels outside every window go to the nearest centre in space.
        for (i, l) in labels.iter_mut().enumerate() {
            if *l == u32::MAX {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                let nearest = centers
                    .iter()
                    .enumerate()
                    .min_by(|a, b| {
                        let da = sq(a.1.x - x) + sq(a.1.y - y);
                        let db = sq(b.1.x - x) + sq(b.1.y - y);
                        da.total_cmp(&db)
                    })
                    .map(|(k, _)| k)
                    .unwrap_or(0);
                *l = nearest as u32;
            }
        }
        let min_size = ((step * step) as usize / 4).max(1);
        SuperpixelLabels::new(w, h, enforce_connectivity(&labels, w, h, min_size))
    }
}

/// Splits labels into 4-connected components, merges components smaller
/// than `min_size` into the previously visited neighbouring region and
/// renumbers densely in scan order.
fn enforce_connectivity(labels: &[u32], w: usize, h: usize, min_size: usize) -> Vec<u32> {
    let n = w * h;
    let mut out = vec![u32::MAX; n];
    let mut next = 0u32;
    let mut stack = Vec::new();
    let mut component = Vec::new();
    for start in 0..n {
        if out[start] != u32::MAX {
            continue;
        }
        let (sx, sy) = (start % w, start / w);
        // label of an already-finished neighbour, for absorbing fragments
        let adjacent = [(sx > 0).then(|| start - 1), (sy > 0).then(|| start - w)]
            .into_iter()
            .flatten()
            .map(|i| out[i])
            .find(|&l| l != u32::MAX);
        let original = labels[start];
        component.clear();
        stack.push(start);
        out[start] = next;
        while let Some(i) = stack.pop() {
            component.push(i);
            let (x, y) = (i % w, i / w);
            let neighbours = [
                (x > 0).then(|| i - 1),
                (x + 1 < w).then(|| i + 1),
                (y > 0).then(|| i - w),
                (y + 1 < h).then(|| i + w),
            ];
            for j in neighbours.into_iter().flatten() {
                if out[j] == u32::MAX && labels[j] == original {
                    out[j] = next;
                    stack.push(j);
                }
            }
        }
        match adjacent {
            Some(l) if component.len() < min_size => {
                for &i in &component {
                    out[i] = l;
                }
            }
            _ => next += 1,
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_region_is_everything() {
        let img = RgbImage::from_fn(9, 7, |x, y| [(x * 20) as u8, (y * 30) as u8, 5]);
        let l = superpixel_segment(&img, 1).unwrap();
        assert_eq!(l.count(), 1);
        assert!(l.as_slice().iter().all(|&v| v == 0));
    }

    #[test]
    fn rejects_impossible_targets() {
        let img = RgbImage::new(4, 4);
        assert!(superpixel_segment(&img, 0).is_err());
        assert!(superpixel_segment(&img, 17).is_err());
        assert!(superpixel_segment(&img, 16).is_ok());
    }

    #[test]
    fn uniform_image_gives_grid_cells() {
        let img = RgbImage::from_fn(64, 64, |_, _| [120, 130, 140]);
        let l = superpixel_segment(&img, 16).unwrap();
        assert_eq!(l.count(), 16);
        let mean = 64.0 * 64.0 / 16.0;
        for s in l.sizes() {
            assert!((s as f64) > 0.5 * mean && (s as f64) < 1.5 * mean, "size {s}");
        }
    }

    #[test]
    fn regions_follow_a_colour_edge() {
        let img = RgbImage::from_fn(40, 40, |x, _| if x < 17 { [255, 0, 0] } else { [0, 0, 255] });
        let l = superpixel_segment(&img, 16).unwrap();
        for y in 0..40 {
            assert_ne!(l.get(16, y), l.get(17, y));
        }
    }

    #[test]
    fn lab_of_white_and_black() {
        let white = srgb_to_lab([255, 255, 255]);
        assert!((white[0] - 100.0).abs() < 1e-3 && white[1].abs() < 1e-2 && white[2].abs() < 1e-2);
        assert!(srgb_to_lab([0, 0, 0])[0].abs() < 1e-9);
    }
}
