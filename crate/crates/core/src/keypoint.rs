//! Keypoint extraction and matching inside selected proposals.
//!
//! The built-in stack is classical: Harris corners, a 256-dimensional
//! signed-gradient patch descriptor and mutual nearest-neighbour matching
//! with a ratio test. Learned extractors and matchers plug in through
//! [`KeypointExtractor`] and [`Matcher`].

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::image::RgbImage;
use crate::math;
use crate::proposal::BBox;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Keypoint {
    pub x: usize,
    pub y: usize,
    /// Unit-norm descriptor.
    pub descriptor: Vec<f64>,
    pub score: f64,
}

/// Indices into the two keypoint sets passed to [`Matcher::match_pair`].
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Correspondence {
    pub a: usize,
    pub b: usize,
    /// Confidence in `[0, 1]`.
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct MatchedPoint {
    pub x: usize,
    pub y: usize,
    pub score: f64,
}

/// Both endpoints of every accepted correspondence.
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct MatchSet {
    pub points: Vec<MatchedPoint>,
    /// Endpoint pairs `(x1, y1, x2, y2)`, kept for rendering.
    pub lines: Vec<[usize; 4]>,
}

impl MatchSet {
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    fn push(&mut self, p: &Keypoint, q: &Keypoint, score: f64) {
        self.points.push(MatchedPoint { x: p.x, y: p.y, score });
        self.points.push(MatchedPoint { x: q.x, y: q.y, score });
        self.lines.push([p.x, p.y, q.x, q.y]);
    }
}

pub trait KeypointExtractor {
    fn name(&self) -> &str;
    /// Keypoints inside `region`, in full-image coordinates.
    fn extract(&self, image: &RgbImage, region: &BBox) -> Vec<Keypoint>;
}

pub trait Matcher {
    fn name(&self) -> &str;
    /// Partial one-to-one assignment between `a` and `b`. Pairs for which
    /// `admissible(i, j)` is false are never considered.
    fn match_filtered(
        &self,
        a: &[Keypoint],
        b: &[Keypoint],
        admissible: &dyn Fn(usize, usize) -> bool,
    ) -> Result<Vec<Correspondence>>;

    fn match_pair(&self, a: &[Keypoint], b: &[Keypoint]) -> Result<Vec<Correspondence>> {
        self.match_filtered(a, b, &|_, _| true)
    }
}

/// Harris corner detector with a signed-gradient patch descriptor.
#[derive(Clone, Debug)]
pub struct HarrisExtractor {
    pub k: f64,
    /// Standard deviation of the structure-tensor window.
    pub sigma: f64,
    /// Responses below this never count as corners.
    pub abs_threshold: f64,
    /// Responses below this fraction of the strongest one are dropped.
    pub rel_threshold: f64,
    pub nms_radius: usize,
    pub max_keypoints: usize,
    /// Padding around the proposal for gradient and descriptor support.
    pub crop_pad: usize,
    /// Proposals with a shorter side yield no keypoints.
    pub min_side: usize,
}

impl Default for HarrisExtractor {
    fn default() -> Self {
        Self {
            k: 0.04,
            sigma: 1.5,
            abs_threshold: 1e-7,
            rel_threshold: 0.01,
            nms_radius: 3,
            max_keypoints: 400,
            crop_pad: 8,
            min_side: 4,
        }
    }
}

/// Descriptor patch side and cell side in pixels.
const PATCH: usize = 16;
const CELL: usize = 2;
pub const DESCRIPTOR_DIM: usize = (PATCH / CELL) * (PATCH / CELL) * 4;

struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    fn at(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.w as isize - 1) as usize;
        let y = y.clamp(0, self.h as isize - 1) as usize;
        self.v[y * self.w + x]
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = math::ceil(3.0 * sigma) as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| math::exp(-((i * i) as f64) / (2.0 * sigma * sigma))).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn blur(p: &Plane, kernel: &[f64]) -> Plane {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = Plane {
        w: p.w,
        h: p.h,
        v: vec![0.0; p.v.len()],
    };
    for y in 0..p.h as isize {
        for x in 0..p.w as isize {
            tmp.v[y as usize * p.w + x as usize] =
                kernel.iter().enumerate().map(|(i, k)| k * p.at(x + i as isize - r, y)).sum();
        }
    }
    let mut out = Plane {
        w: p.w,
        h: p.h,
        v: vec![0.0; p.v.len()],
    };
    for y in 0..p.h as isize {
        for x in 0..p.w as isize {
            out.v[y as usize * p.w + x as usize] =
                kernel.iter().enumerate().map(|(i, k)| k * tmp.at(x, y + i as isize - r)).sum();
        }
    }
    out
}

fn gradients(g: &Plane) -> (Plane, Plane) {
    let mut gx = vec![0.0; g.v.len()];
    let mut gy = vec![0.0; g.v.len()];
    for y in 0..g.h as isize {
        for x in 0..g.w as isize {
            let i = y as usize * g.w + x as usize;
            gx[i] = (g.at(x + 1, y - 1) + 2.0 * g.at(x + 1, y) + g.at(x + 1, y + 1)
                - g.at(x - 1, y - 1)
                - 2.0 * g.at(x - 1, y)
                - g.at(x - 1, y + 1))
                / 8.0;
            gy[i] = (g.at(x - 1, y + 1) + 2.0 * g.at(x, y + 1) + g.at(x + 1, y + 1)
                - g.at(x - 1, y - 1)
                - 2.0 * g.at(x, y - 1)
                - g.at(x + 1, y - 1))
                / 8.0;
        }
    }
    (
        Plane { w: g.w, h: g.h, v: gx },
        Plane { w: g.w, h: g.h, v: gy },
    )
}

/// Signed-gradient histogram over a 16×16 patch centred at `(cx, cy)`:
/// 8×8 cells of 2×2 pixels, each accumulating `gx⁺, gx⁻, gy⁺, gy⁻`.
fn describe(gx: &Plane, gy: &Plane, cx: usize, cy: usize) -> Option<Vec<f64>> {
    let mut d = vec![0.0; DESCRIPTOR_DIM];
    let half = (PATCH / 2) as isize;
    for py in 0..PATCH {
        for px in 0..PATCH {
            let x = cx as isize + px as isize - half;
            let y = cy as isize + py as isize - half;
            let (vx, vy) = (gx.at(x, y), gy.at(x, y));
            let cell = (py / CELL) * (PATCH / CELL) + px / CELL;
            let bins = &mut d[cell * 4..cell * 4 + 4];
            if vx > 0.0 {
                bins[0] += vx;
            } else {
                bins[1] -= vx;
            }
            if vy > 0.0 {
                bins[2] += vy;
            } else {
                bins[3] -= vy;
            }
        }
    }
    let norm = math::sqrt(d.iter().map(|v| v * v).sum());
    if norm <= 1e-12 {
        return None;
    }
    d.iter_mut().for_each(|v| *v /= norm);
    Some(d)
}

impl HarrisExtractor {
    /// Harris response over a crop, row-major.
    fn response(&self, gx: &Plane, gy: &Plane) -> Vec<f64> {
        let n = gx.v.len();
        let prod = |f: &dyn Fn(usize) -> f64| Plane {
            w: gx.w,
            h: gx.h,
            v: (0..n).map(f).collect(),
        };
        let kernel = gaussian_kernel(self.sigma);
        let sxx = blur(&prod(&|i| gx.v[i] * gx.v[i]), &kernel);
        let syy = blur(&prod(&|i| gy.v[i] * gy.v[i]), &kernel);
        let sxy = blur(&prod(&|i| gx.v[i] * gy.v[i]), &kernel);
        (0..n)
            .map(|i| {
                let tr = sxx.v[i] + syy.v[i];
                sxx.v[i] * syy.v[i] - sxy.v[i] * sxy.v[i] - self.k * tr * tr
            })
            .collect()
    }
}

impl KeypointExtractor for HarrisExtractor {
    fn name(&self) -> &str {
        "classical"
    }

    fn extract(&self, image: &RgbImage, region: &BBox) -> Vec<Keypoint> {
        if !region.fits(image.width(), image.height())
            || region.width() < self.min_side
            || region.height() < self.min_side
        {
            return Vec::new();
        }
        let crop = region.padded(self.crop_pad, image.width(), image.height());
        let gray = image.to_gray();
        let plane = Plane {
            w: crop.width(),
            h: crop.height(),
            v: (crop.y1..crop.y2)
                .flat_map(|y| gray[y * image.width() + crop.x1..y * image.width() + crop.x2].iter().copied())
                .collect(),
        };
        let (gx, gy) = gradients(&plane);
        let r = self.response(&gx, &gy);
        let max_r = r.iter().cloned().fold(0.0, f64::max);
        let threshold = self.abs_threshold.max(self.rel_threshold * max_r);
        let rad = self.nms_radius as isize;
        let (w, h) = (plane.w as isize, plane.h as isize);
        let mut found: Vec<(f64, usize, usize)> = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let (ix, iy) = (x as usize + crop.x1, y as usize + crop.y1);
                if !region.contains(ix, iy) {
                    continue;
                }
                let v = r[(y * w + x) as usize];
                if v <= threshold {
                    continue;
                }
                let mut is_max = true;
                'scan: for dy in -rad..=rad {
                    for dx in -rad..=rad {
                        let (nx, ny) = (x + dx, y + dy);
                        if (dx, dy) == (0, 0) || nx < 0 || ny < 0 || nx >= w || ny >= h {
                            continue;
                        }
                        let u = r[(ny * w + nx) as usize];
                        // equal neighbours: the first in scan order wins
                        if u > v || (u == v && (ny, nx) < (y, x)) {
                            is_max = false;
                            break 'scan;
                        }
                    }
                }
                if is_max {
                    found.push((v, x as usize, y as usize));
                }
            }
        }
        found.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.2, a.1).cmp(&(b.2, b.1))));
        found.truncate(self.max_keypoints);
        found
            .into_iter()
            .filter_map(|(score, x, y)| {
                describe(&gx, &gy, x, y).map(|descriptor| Keypoint {
                    x: x + crop.x1,
                    y: y + crop.y1,
                    descriptor,
                    score,
                })
            })
            .collect()
    }
}

/// Mutual nearest neighbours that also pass a ratio test in both directions.
#[derive(Clone, Debug)]
pub struct MutualNnMatcher {
    pub ratio: f64,
}

impl Default for MutualNnMatcher {
    fn default() -> Self {
        Self { ratio: 0.75 }
    }
}

/// Stand-in second-neighbour distance when fewer than two candidates exist:
/// the distance between orthogonal unit vectors.
const LONE_SECOND: f64 = core::f64::consts::SQRT_2;

fn distance(a: &[f64], b: &[f64]) -> f64 {
    math::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// `(index, nearest, second)` per row; ties go to the lower index.
fn nearest(dist: &[f64], rows: usize, cols: usize, by_row: bool) -> Vec<Option<(usize, f64, f64)>> {
    let (outer, inner) = if by_row { (rows, cols) } else { (cols, rows) };
    (0..outer)
        .map(|o| {
            let mut best: Option<(usize, f64)> = None;
            let mut second = LONE_SECOND;
            for i in 0..inner {
                let d = if by_row { dist[o * cols + i] } else { dist[i * cols + o] };
                if d.is_nan() {
                    continue;
                }
                match best {
                    Some((_, bd)) if d >= bd => second = second.min(d),
                    Some((_, bd)) => {
                        second = second.min(bd);
                        best = Some((i, d));
                    }
                    None => best = Some((i, d)),
                }
            }
            best.map(|(i, d)| (i, d, second))
        })
        .collect()
}

impl Matcher for MutualNnMatcher {
    fn name(&self) -> &str {
        "classical"
    }

    fn match_filtered(
        &self,
        a: &[Keypoint],
        b: &[Keypoint],
        admissible: &dyn Fn(usize, usize) -> bool,
    ) -> Result<Vec<Correspondence>> {
        if a.is_empty() || b.is_empty() {
            return Ok(Vec::new());
        }
        let dim = a[0].descriptor.len();
        if a.iter().chain(b).any(|k| k.descriptor.len() != dim) {
            return Err(invalid!("descriptor dimensions differ"));
        }
        let (n, m) = (a.len(), b.len());
        let mut dist = vec![f64::NAN; n * m];
        for i in 0..n {
            for j in 0..m {
                if admissible(i, j) {
                    dist[i * m + j] = distance(&a[i].descriptor, &b[j].descriptor);
                }
            }
        }
        let fwd = nearest(&dist, n, m, true);
        let bwd = nearest(&dist, n, m, false);
        let mut out = Vec::new();
        for (i, f) in fwd.iter().enumerate() {
            let Some((j, d, s1)) = *f else { continue };
            let Some((back, _, s2)) = bwd[j] else { continue };
            if back != i {
                continue;
            }
            let ratio = |second: f64| if second > 0.0 { d / second } else { 1.0 };
            let r = ratio(s1).max(ratio(s2));
            if r < self.ratio {
                out.push(Correspondence {
                    a: i,
                    b: j,
                    score: (1.0 - r).clamp(0.0, 1.0),
                });
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct MatchParams {
    /// Matched endpoints must be at least this fraction of the proposal
    /// diagonal apart.
    pub min_separation: f64,
    /// Whether each proposal is also matched against itself.
    pub self_matching: bool,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            min_separation: 0.1,
            self_matching: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchOutcome {
    pub matches: MatchSet,
    /// Proposals containing at least one matched point.
    pub matched: Vec<BBox>,
    pub pair_calls: usize,
    pub self_calls: usize,
}

/// Matches every unordered pair of distinct proposals and, optionally,
/// every proposal with itself.
///
/// For a pair the separation floor uses the shorter of the two diagonals, so
/// overlapping proposals cannot match a corner with its own copy.
pub fn match_all_pairs(
    image: &RgbImage,
    proposals: &[BBox],
    extractor: &dyn KeypointExtractor,
    matcher: &dyn Matcher,
    params: &MatchParams,
) -> Result<MatchOutcome> {
    let sets: Vec<Vec<Keypoint>> = proposals.iter().map(|b| extractor.extract(image, b)).collect();
    let mut out = MatchOutcome::default();
    let far = |p: &Keypoint, q: &Keypoint, floor: f64| {
        let dx = p.x as f64 - q.x as f64;
        let dy = p.y as f64 - q.y as f64;
        dx * dx + dy * dy >= floor * floor
    };
    for i in 0..proposals.len() {
        for j in i..proposals.len() {
            if i == j && !params.self_matching {
                continue;
            }
            let floor = params.min_separation * proposals[i].diagonal().min(proposals[j].diagonal());
            let (ka, kb) = (&sets[i], &sets[j]);
            let found = matcher.match_filtered(ka, kb, &|p, q| far(&ka[p], &kb[q], floor))?;
            if i == j {
                out.self_calls += 1;
            } else {
                out.pair_calls += 1;
            }
            for c in found {
                if i == j && c.a > c.b {
                    continue;
                }
                out.matches.push(&ka[c.a], &kb[c.b], c.score);
            }
        }
    }
    out.matched = proposals
        .iter()
        .filter(|b| out.matches.points.iter().any(|p| b.contains(p.x, p.y)))
        .copied()
        .collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kp(x: usize, y: usize, descriptor: Vec<f64>) -> Keypoint {
        Keypoint { x, y, descriptor, score: 1.0 }
    }

    fn unit(dim: usize, hot: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[hot] = 1.0;
        v
    }

    fn corner_image() -> RgbImage {
        RgbImage::from_fn(48, 48, |x, y| if x >= 20 && y >= 20 { [255, 255, 255] } else { [0, 0, 0] })
    }

    #[test]
    fn flat_region_has_no_corners() {
        let img = RgbImage::from_fn(40, 40, |_, _| [90, 90, 90]);
        let b = BBox::new(5, 5, 35, 35).unwrap();
        assert!(HarrisExtractor::default().extract(&img, &b).is_empty());
    }

    #[test]
    fn corner_is_found_near_its_vertex() {
        let b = BBox::new(8, 8, 40, 40).unwrap();
        let kps = HarrisExtractor::default().extract(&corner_image(), &b);
        assert!(!kps.is_empty());
        assert!(kps.iter().any(|k| k.x.abs_diff(20) <= 2 && k.y.abs_diff(20) <= 2));
        for k in &kps {
            assert!(b.contains(k.x, k.y));
            let n: f64 = k.descriptor.iter().map(|v| v * v).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn tiny_boxes_yield_nothing() {
        let b = BBox::new(19, 19, 21, 21).unwrap();
        assert!(HarrisExtractor::default().extract(&corner_image(), &b).is_empty());
    }

    #[test]
    fn shifted_copies_all_match() {
        let a: Vec<Keypoint> = (0..6).map(|i| kp(i, 0, unit(8, i))).collect();
        let b: Vec<Keypoint> = a.iter().map(|k| kp(k.x + 30, k.y + 5, k.descriptor.clone())).collect();
        let m = MutualNnMatcher::default().match_pair(&a, &b).unwrap();
        assert_eq!(m.len(), 6);
        assert!(m.iter().all(|c| c.a == c.b && c.score >= 0.25));
    }

    #[test]
    fn orthogonal_descriptors_do_not_match() {
        let a: Vec<Keypoint> = (0..3).map(|i| kp(i, 0, unit(8, i))).collect();
        let b: Vec<Keypoint> = (0..3).map(|i| kp(i, 9, unit(8, i + 4))).collect();
        assert!(MutualNnMatcher::default().match_pair(&a, &b).unwrap().is_empty());
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        let a = vec![kp(0, 0, unit(4, 0))];
        assert!(MutualNnMatcher::default().match_pair(&[], &a).unwrap().is_empty());
        let b = vec![kp(0, 0, unit(5, 0))];
        assert!(MutualNnMatcher::default().match_pair(&a, &b).is_err());
    }

    #[test]
    fn single_proposal_has_no_partner() {
        let img = RgbImage::from_fn(48, 48, |x, y| [((x * 7) ^ (y * 13)) as u8, 0, 0]);
        let b = BBox::new(0, 0, 20, 20).unwrap();
        let params = MatchParams {
            self_matching: false,
            ..MatchParams::default()
        };
        let out = match_all_pairs(&img, &[b], &HarrisExtractor::default(), &MutualNnMatcher::default(), &params).unwrap();
        assert!(out.matches.is_empty());
        assert_eq!(out.pair_calls, 0);
    }
}
