//! Raster types shared by every stage.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::math;
use crate::tensor::Tensor;

/// 8-bit interleaved RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(invalid!(
                "raw RGB buffer of {} bytes does not match {}x{}",
                data.len(),
                width,
                height
            ));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.put(x, y, f(x, y));
            }
        }
        img
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, px: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&px);
    }

    /// Luma in `[0, 1]` (Rec. 601 weights), row-major.
    pub fn to_gray(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0)
            .collect()
    }

    /// Network input: `3 × h × w`, values scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let n = self.width * self.height;
        let mut t = Tensor::zeros(3, self.height, self.width);
        let d = t.data_mut();
        for (i, p) in self.data.chunks_exact(3).enumerate() {
            d[i] = p[0] as f64 / 255.0;
            d[n + i] = p[1] as f64 / 255.0;
            d[2 * n + i] = p[2] as f64 / 255.0;
        }
        t
    }

    /// Bilinear resize (pixel-center aligned).
    pub fn resize(&self, width: usize, height: usize) -> RgbImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let xs = sample_grid(self.width, width);
        let ys = sample_grid(self.height, height);
        let mut out = RgbImage::new(width, height);
        for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                let a = self.get(x0, y0);
                let b = self.get(x1, y0);
                let c = self.get(x0, y1);
                let d = self.get(x1, y1);
                let mut px = [0u8; 3];
                for k in 0..3 {
                    let top = a[k] as f64 * (1.0 - fx) + b[k] as f64 * fx;
                    let bot = c[k] as f64 * (1.0 - fx) + d[k] as f64 * fx;
                    px[k] = clamp_u8(top * (1.0 - fy) + bot * fy);
                }
                out.put(x, y, px);
            }
        }
        out
    }
}

#[inline]
pub(crate) fn clamp_u8(v: f64) -> u8 {
    let r = math::round(v);
    if r <= 0.0 {
        0
    } else if r >= 255.0 {
        255
    } else {
        r as u8
    }
}

/// For each output coordinate: the two source taps and the weight of the
/// second one.
fn sample_grid(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (math::floor(s) as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Per-pixel suspicion scores in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ScoreMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    /// Values must be finite and within `[0, 1]`.
    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(invalid!("score map has {} values for {}x{}", data.len(), width, height));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid!("score {v} outside [0, 1]"));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_mask(mask: &BinaryMask) -> Self {
        Self {
            width: mask.width(),
            height: mask.height(),
            data: mask.as_slice().iter().map(|&v| v as f64).collect(),
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Pixels strictly above `t` become 1.
    pub fn threshold(&self, t: f64) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| (v > t) as u8).collect(),
        }
    }

    /// Bilinear resize, used when the network ran on a resized copy.
    pub fn resize(&self, width: usize, height: usize) -> ScoreMap {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let xs = sample_grid(self.width, width);
        let ys = sample_grid(self.height, height);
        let mut data = Vec::with_capacity(width * height);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
                let bot = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
                data.push((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
            }
        }
        ScoreMap { width, height, data }
    }
}

/// `{0, 1}` labeling; 1 marks both copied and pasted regions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    /// Any non-zero byte counts as 1.
    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(invalid!("mask has {} values for {}x{}", data.len(), width, height));
        }
        Ok(Self {
            width,
            height,
            data: data.into_iter().map(|v| (v != 0) as u8).collect(),
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = f(x, y) as u8;
            }
        }
        m
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v as u8;
    }

    #[inline]
    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        if self.width != other.width || self.height != other.height {
            return Err(invalid!("mask shapes differ"));
        }
        Ok(BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a | b).collect(),
        })
    }

    /// Tight bounding box `(x1, y1, x2, y2)`, half-open; `None` when empty.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x + 1, y + 1),
                        Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x + 1), d.max(y + 1)),
                    });
                }
            }
        }
        bb
    }

    /// Nearest-neighbor resize.
    pub fn resize(&self, width: usize, height: usize) -> BinaryMask {
        if width == self.width && height == self.height {
            return self.clone();
        }
        BinaryMask::from_fn(width, height, |x, y| {
            let sx = ((x * 2 + 1) * self.width / (2 * width)).min(self.width - 1);
            let sy = ((y * 2 + 1) * self.height / (2 * height)).min(self.height - 1);
            self.get(sx, sy)
        })
    }

    /// Morphological erosion with a 3×3 cross, `steps` times. Pixels outside
    /// the image count as background.
    pub fn erode(&self, steps: usize) -> BinaryMask {
        let mut cur = self.clone();
        for _ in 0..steps {
            let prev = cur.clone();
            for y in 0..self.height {
                for x in 0..self.width {
                    if !prev.get(x, y) {
                        continue;
                    }
                    let keep = x > 0
                        && y > 0
                        && x + 1 < self.width
                        && y + 1 < self.height
                        && prev.get(x - 1, y)
                        && prev.get(x + 1, y)
                        && prev.get(x, y - 1)
                        && prev.get(x, y + 1);
                    cur.set(x, y, keep);
                }
            }
        }
        cur
    }

    /// Morphological dilation with a 3×3 cross, `steps` times.
    pub fn dilate(&self, steps: usize) -> BinaryMask {
        let mut cur = self.clone();
        for _ in 0..steps {
            let prev = cur.clone();
            for y in 0..self.height {
                for x in 0..self.width {
                    if prev.get(x, y) {
                        continue;
                    }
                    let grow = (x > 0 && prev.get(x - 1, y))
                        || (x + 1 < self.width && prev.get(x + 1, y))
                        || (y > 0 && prev.get(x, y - 1))
                        || (y + 1 < self.height && prev.get(x, y + 1));
                    cur.set(x, y, grow);
                }
            }
        }
        cur
    }

    /// Number of 4-connected foreground components.
    pub fn connected_components(&self) -> usize {
        let mut seen = vec![false; self.data.len()];
        let mut stack = Vec::new();
        let mut count = 0;
        for start in 0..self.data.len() {
            if self.data[start] == 0 || seen[start] {
                continue;
            }
            count += 1;
            seen[start] = true;
            stack.push(start);
            while let Some(i) = stack.pop() {
                let (x, y) = (i % self.width, i / self.width);
                let mut visit = |j: usize| {
                    if self.data[j] != 0 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if x > 0 {
                    visit(i - 1);
                }
                if x + 1 < self.width {
                    visit(i + 1);
                }
                if y > 0 {
                    visit(i - self.width);
                }
                if y + 1 < self.height {
                    visit(i + self.width);
                }
            }
        }
        count
    }
}
