//! Synthetic copy-move forgeries with ground truth.
//!
//! A region is taken from an annotated image, warped by
//! `rotation ∘ scale ∘ width-deformation` about its bounding-box centre,
//! shifted in luminance and pasted at a uniformly drawn offset that keeps the
//! whole footprint inside the image. The ground truth marks source and paste.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::image::{clamp_u8, BinaryMask, RgbImage};
use crate::math;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// Closed interval sampled uniformly; `lo == hi` pins the value.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "[f64; 2]", into = "[f64; 2]"))]
pub struct Interval {
    lo: f64,
    hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(invalid!("invalid interval [{lo}, {hi}]"));
        }
        Ok(Self { lo, hi })
    }

    pub const fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.gen_range(self.lo..self.hi)
        }
    }
}

impl TryFrom<[f64; 2]> for Interval {
    type Error = Error;

    fn try_from(v: [f64; 2]) -> Result<Self> {
        Interval::new(v[0], v[1])
    }
}

impl From<Interval> for [f64; 2] {
    fn from(i: Interval) -> Self {
        [i.lo, i.hi]
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TransformRanges {
    pub rotation_deg: Interval,
    pub scale: Interval,
    /// Additive shift in 8-bit units.
    pub luminance: Interval,
    /// Horizontal stretch factor.
    pub deform_width: Interval,
}

impl Default for TransformRanges {
    fn default() -> Self {
        Self {
            rotation_deg: Interval { lo: -60.0, hi: 60.0 },
            scale: Interval { lo: 0.5, hi: 4.0 },
            luminance: Interval { lo: -32.0, hi: 32.0 },
            deform_width: Interval { lo: 0.5, hi: 2.0 },
        }
    }
}

impl TransformRanges {
    pub fn identity() -> Self {
        Self {
            rotation_deg: Interval::point(0.0),
            scale: Interval::point(1.0),
            luminance: Interval::point(0.0),
            deform_width: Interval::point(1.0),
        }
    }

    /// Small transforms used for desk-scale training.
    pub fn mild() -> Self {
        Self {
            rotation_deg: Interval { lo: -10.0, hi: 10.0 },
            scale: Interval { lo: 0.9, hi: 1.2 },
            luminance: Interval { lo: -10.0, hi: 10.0 },
            deform_width: Interval { lo: 0.9, hi: 1.1 },
        }
    }

    /// Pure translation with a small luminance change.
    pub fn easy() -> Self {
        Self {
            luminance: Interval { lo: -8.0, hi: 8.0 },
            ..Self::identity()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale.lo <= 0.0 || self.deform_width.lo <= 0.0 {
            return Err(invalid!("scale and deformation must stay positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SynthConfig {
    /// Side of the square output.
    pub size: usize,
    /// Transform/offset draws before giving up on a sample.
    pub max_retries: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 512,
            max_retries: 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct TransformParams {
    pub rotation_deg: f64,
    pub scale: f64,
    pub luminance: f64,
    pub deform_width: f64,
}

impl TransformParams {
    pub const IDENTITY: TransformParams = TransformParams {
        rotation_deg: 0.0,
        scale: 1.0,
        luminance: 0.0,
        deform_width: 1.0,
    };

    /// Inverse of `R(θ) S(s) D(d)` as a row-major 2×2 matrix.
    fn inverse(&self) -> [f64; 4] {
        let (sin, cos) = math::sin_cos(self.rotation_deg * core::f64::consts::PI / 180.0);
        let (sx, sy) = (1.0 / (self.scale * self.deform_width), 1.0 / self.scale);
        // D⁻¹ S⁻¹ R(−θ)
        [sx * cos, sx * sin, -sy * sin, sy * cos]
    }

    fn forward(&self) -> [f64; 4] {
        let (sin, cos) = math::sin_cos(self.rotation_deg * core::f64::consts::PI / 180.0);
        let (sx, sy) = (self.scale * self.deform_width, self.scale);
        [cos * sx, -sin * sy, sin * sx, cos * sy]
    }
}

/// Everything needed to recompute a sample's ground truth.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Provenance {
    /// Bounding box of the source region, `[x1, y1, x2, y2]`.
    pub source_box: [usize; 4],
    /// Source box corners after the transform, before the offset.
    pub source_polygon: [[f64; 2]; 4],
    pub transform: TransformParams,
    /// Transform composition, applied right to left.
    pub composition: String,
    pub offset: [i64; 2],
    /// Bounding box of the pasted footprint.
    pub paste_box: [usize; 4],
    pub seed: u64,
    pub stream: u64,
    pub attempts: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForgerySample {
    pub image: RgbImage,
    pub mask: BinaryMask,
    /// Resized source region.
    pub source: BinaryMask,
    pub paste: BinaryMask,
    pub provenance: Provenance,
}

/// Warped region sampled at relative destination pixels (offset zero).
struct Patch {
    pixels: Vec<(isize, isize, [u8; 3])>,
    bounds: [isize; 4],
}

fn centre(b: (usize, usize, usize, usize)) -> (f64, f64) {
    ((b.0 + b.2 - 1) as f64 / 2.0, (b.1 + b.3 - 1) as f64 / 2.0)
}

fn bilinear(img: &RgbImage, x: f64, y: f64) -> [f64; 3] {
    let (w, h) = (img.width() as isize, img.height() as isize);
    let (x0, y0) = (math::floor(x), math::floor(y));
    let (fx, fy) = (x - x0, y - y0);
    let at = |xi: isize, yi: isize| img.get(xi.clamp(0, w - 1) as usize, yi.clamp(0, h - 1) as usize);
    let (xi, yi) = (x0 as isize, y0 as isize);
    let (a, b, c, d) = (at(xi, yi), at(xi + 1, yi), at(xi, yi + 1), at(xi + 1, yi + 1));
    let mut out = [0.0; 3];
    for k in 0..3 {
        out[k] = (1.0 - fx) * (1.0 - fy) * a[k] as f64
            + fx * (1.0 - fy) * b[k] as f64
            + (1.0 - fx) * fy * c[k] as f64
            + fx * fy * d[k] as f64;
    }
    out
}

fn warp(image: &RgbImage, region: &BinaryMask, bbox: (usize, usize, usize, usize), t: &TransformParams) -> Patch {
    let (cx, cy) = centre(bbox);
    let inv = t.inverse();
    let corners = corner_polygon(bbox, t);
    let min_x = corners.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
    let max_x = corners.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
    let min_y = corners.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
    let max_y = corners.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
    let (w, h) = (region.width() as isize, region.height() as isize);
    let mut pixels = Vec::new();
    let mut bounds = [isize::MAX, isize::MAX, isize::MIN, isize::MIN];
    for py in (math::floor(min_y) as isize - 1)..=(math::ceil(max_y) as isize + 1) {
        for px in (math::floor(min_x) as isize - 1)..=(math::ceil(max_x) as isize + 1) {
            let (dx, dy) = (px as f64 - cx, py as f64 - cy);
            let sx = cx + inv[0] * dx + inv[1] * dy;
            let sy = cy + inv[2] * dx + inv[3] * dy;
            let (nx, ny) = (math::floor(sx + 0.5) as isize, math::floor(sy + 0.5) as isize);
            if nx < 0 || ny < 0 || nx >= w || ny >= h || !region.get(nx as usize, ny as usize) {
                continue;
            }
            let v = bilinear(image, sx, sy);
            let colour = [
                clamp_u8(v[0] + t.luminance),
                clamp_u8(v[1] + t.luminance),
                clamp_u8(v[2] + t.luminance),
            ];
            pixels.push((px, py, colour));
            bounds = [bounds[0].min(px), bounds[1].min(py), bounds[2].max(px + 1), bounds[3].max(py + 1)];
        }
    }
    Patch { pixels, bounds }
}

fn corner_polygon(bbox: (usize, usize, usize, usize), t: &TransformParams) -> [[f64; 2]; 4] {
    let (cx, cy) = centre(bbox);
    let f = t.forward();
    let (x0, y0) = (bbox.0 as f64 - 0.5, bbox.1 as f64 - 0.5);
    let (x1, y1) = (bbox.2 as f64 - 0.5, bbox.3 as f64 - 0.5);
    [[x0, y0], [x1, y0], [x1, y1], [x0, y1]].map(|[x, y]| {
        let (dx, dy) = (x - cx, y - cy);
        [cx + f[0] * dx + f[1] * dy, cy + f[2] * dx + f[3] * dy]
    })
}

/// Paste footprint implied by a region, transform and offset, on a
/// `region.width() × region.height()` canvas.
pub fn paste_footprint(region: &BinaryMask, t: &TransformParams, offset: [i64; 2]) -> Result<BinaryMask> {
    let bbox = region.bounding_box().ok_or_else(|| invalid!("empty source region"))?;
    let image = RgbImage::new(region.width(), region.height());
    let patch = warp(&image, region, bbox, t);
    let mut m = BinaryMask::new(region.width(), region.height());
    for (px, py, _) in patch.pixels {
        let (x, y) = (px + offset[0] as isize, py + offset[1] as isize);
        if x < 0 || y < 0 || x as usize >= m.width() || y as usize >= m.height() {
            return Err(invalid!("offset places the paste outside the image"));
        }
        m.set(x as usize, y as usize, true);
    }
    Ok(m)
}

/// Per-sample generator seeded with `seed` on stream `stream`.
pub fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Resizes `image` and `region` to `config.size` square and pastes a warped
/// copy of the region. Deterministic in `(seed, stream)`.
pub fn synthesize_forgery(
    image: &RgbImage,
    region: &BinaryMask,
    ranges: &TransformRanges,
    config: &SynthConfig,
    seed: u64,
    stream: u64,
) -> Result<ForgerySample> {
    ranges.validate()?;
    if region.width() != image.width() || region.height() != image.height() {
        return Err(invalid!("region mask size differs from the image"));
    }
    if region.is_empty() {
        return Err(invalid!("region mask is empty"));
    }
    let size = config.size;
    let (image, region) = if image.width() == size && image.height() == size {
        (image.clone(), region.clone())
    } else {
        (image.resize(size, size), region.resize(size, size))
    };
    let bbox = region
        .bounding_box()
        .ok_or_else(|| Error::SkipSample("region vanished after resizing".to_string()))?;
    let mut rng = sample_rng(seed, stream);
    for attempt in 1..=config.max_retries.max(1) {
        let t = TransformParams {
            rotation_deg: ranges.rotation_deg.sample(&mut rng),
            scale: ranges.scale.sample(&mut rng),
            luminance: ranges.luminance.sample(&mut rng),
            deform_width: ranges.deform_width.sample(&mut rng),
        };
        let patch = warp(&image, &region, bbox, &t);
        if patch.pixels.is_empty() {
            continue;
        }
        let [bx0, by0, bx1, by1] = patch.bounds;
        let (lo_x, hi_x) = (-bx0, size as isize - bx1);
        let (lo_y, hi_y) = (-by0, size as isize - by1);
        if lo_x > hi_x || lo_y > hi_y {
            continue;
        }
        let ox = rng.gen_range(lo_x..=hi_x);
        let oy = rng.gen_range(lo_y..=hi_y);
        let mut out = image.clone();
        let mut paste = BinaryMask::new(size, size);
        for &(px, py, colour) in &patch.pixels {
            let (x, y) = ((px + ox) as usize, (py + oy) as usize);
            out.put(x, y, colour);
            paste.set(x, y, true);
        }
        let mask = region.union(&paste)?;
        let provenance = Provenance {
            source_box: [bbox.0, bbox.1, bbox.2, bbox.3],
            source_polygon: corner_polygon(bbox, &t),
            transform: t,
            composition: "rotation*scale*deform_width".to_string(),
            offset: [ox as i64, oy as i64],
            paste_box: [
                (bx0 + ox) as usize,
                (by0 + oy) as usize,
                (bx1 + ox) as usize,
                (by1 + oy) as usize,
            ],
            seed,
            stream,
            attempts: attempt,
        };
        return Ok(ForgerySample {
            image: out,
            mask,
            source: region,
            paste,
            provenance,
        });
    }
    Err(Error::SkipSample(alloc::format!(
        "no placement found in {} attempts",
        config.max_retries
    )))
}

/// A generated image with one mask per annotated object.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    pub image: RgbImage,
    pub regions: Vec<BinaryMask>,
}

/// Smooth colour field: random colours on a `cell`-pixel grid, bilinearly
/// interpolated.
fn value_noise<R: Rng>(rng: &mut R, size: usize, cell: usize, base: [f64; 3], spread: f64) -> Vec<[f64; 3]> {
    let g = size / cell + 2;
    let grid: Vec<[f64; 3]> = (0..g * g)
        .map(|_| {
            let mut c = [0.0; 3];
            for k in 0..3 {
                c[k] = base[k] + rng.gen_range(-spread..spread);
            }
            c
        })
        .collect();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (gx, gy) = (x as f64 / cell as f64, y as f64 / cell as f64);
            let (ix, iy) = (gx as usize, gy as usize);
            let (fx, fy) = (gx - ix as f64, gy - iy as f64);
            let mut c = [0.0; 3];
            for k in 0..3 {
                c[k] = (1.0 - fx) * (1.0 - fy) * grid[iy * g + ix][k]
                    + fx * (1.0 - fy) * grid[iy * g + ix + 1][k]
                    + (1.0 - fx) * fy * grid[(iy + 1) * g + ix][k]
                    + fx * fy * grid[(iy + 1) * g + ix + 1][k];
            }
            out.push(c);
        }
    }
    out
}

fn random_colour<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.gen_range(30.0..225.0), rng.gen_range(30.0..225.0), rng.gen_range(30.0..225.0)]
}

/// Procedural stand-in for an annotated photo corpus: a smooth textured
/// background with 1 to 4 textured shapes (ellipses, rectangles, triangles),
/// each annotated by its visible footprint.
pub fn procedural_scene(size: usize, seed: u64) -> AnnotatedImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = (size / 8).max(4);
    let base = random_colour(&mut rng);
    let background = value_noise(&mut rng, size, cell, base, 60.0);
    let detail = value_noise(&mut rng, size, (size / 32).max(2), [0.0; 3], 25.0);
    let mut pixels: Vec<[f64; 3]> = background.iter().zip(&detail).map(|(a, b)| [a[0] + b[0], a[1] + b[1], a[2] + b[2]]).collect();
    let mut owner = vec![usize::MAX; size * size];
    let shapes = rng.gen_range(1..=4);
    for s in 0..shapes {
        let r = rng.gen_range(0.08..0.18) * size as f64;
        let aspect = rng.gen_range(0.6..1.6);
        let (rx, ry) = (r * aspect, r / aspect);
        let cx = rng.gen_range(rx..size as f64 - rx);
        let cy = rng.gen_range(ry..size as f64 - ry);
        let kind = rng.gen_range(0..3);
        let angle: f64 = rng.gen_range(0.0..core::f64::consts::PI);
        let (sin, cos) = math::sin_cos(angle);
        let tex_cell = rng.gen_range(3..8).min(size.max(1));
        let tex_base = random_colour(&mut rng);
        let tex = value_noise(&mut rng, size, tex_cell, tex_base, 70.0);
        let stripe_period = rng.gen_range(4.0..12.0);
        let stripe_amp = rng.gen_range(0.0..40.0);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
                let inside = match kind {
                    0 => (u / rx) * (u / rx) + (v / ry) * (v / ry) <= 1.0,
                    1 => u.abs() <= rx * 0.85 && v.abs() <= ry * 0.85,
                    _ => v <= ry * 0.8 && v >= -ry + 2.0 * ry * (u.abs() / rx),
                };
                if inside {
                    let i = y * size + x;
                    let stripe = stripe_amp * math::sin_cos((u + v) * core::f64::consts::TAU / stripe_period).0;
                    pixels[i] = [tex[i][0] + stripe, tex[i][1] - stripe, tex[i][2] + 0.5 * stripe];
                    owner[i] = s;
                }
            }
        }
    }
    let image = RgbImage::from_fn(size, size, |x, y| {
        let p = pixels[y * size + x];
        [clamp_u8(p[0]), clamp_u8(p[1]), clamp_u8(p[2])]
    });
    let regions = (0..shapes)
        .map(|s| BinaryMask::from_fn(size, size, |x, y| owner[y * size + x] == s))
        .filter(|m| m.count() >= 16)
        .collect();
    AnnotatedImage { image, regions }
}
