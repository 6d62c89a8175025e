//! Two-label CRF refinement with mean-field inference.
//!
//! ```text
//! E(X) = Σ_i ψ_u(X_i) + Σ_{i<j, |i−j|∞ ≤ r} [X_i ≠ X_j] k(f_i, f_j)
//! k    = w1 exp(−|p_i−p_j|²/2θα² − |I_i−I_j|²/2θβ²) + w2 exp(−|p_i−p_j|²/2θγ²)
//! ```
//!
//! Each unordered pair within the window is counted once, which is the
//! energy whose mean-field fixed point is the update used below. Messages
//! are computed exactly inside the `window × window` neighbourhood.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::image::{BinaryMask, RgbImage, ScoreMap};
use crate::math;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct CrfParams {
    /// Appearance kernel weight.
    pub w1: f64,
    /// Smoothness kernel weight.
    pub w2: f64,
    /// Appearance kernel spatial bandwidth, pixels.
    pub theta_alpha: f64,
    /// Appearance kernel colour bandwidth, 8-bit units.
    pub theta_beta: f64,
    /// Smoothness kernel bandwidth, pixels.
    pub theta_gamma: f64,
    /// Odd side of the message window.
    pub window: usize,
    pub iters: usize,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            w1: 3.0,
            w2: 0.25,
            theta_alpha: 13.0,
            theta_beta: 30.0,
            theta_gamma: 3.0,
            window: 11,
            iters: 5,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_alpha > 0.0 && self.theta_beta > 0.0 && self.theta_gamma > 0.0) {
            return Err(invalid!("CRF bandwidths must be positive"));
        }
        if self.window < 3 || self.window % 2 == 0 {
            return Err(invalid!("CRF window must be odd and at least 3, got {}", self.window));
        }
        if self.iters == 0 {
            return Err(invalid!("CRF needs at least one iteration"));
        }
        if !(self.w1.is_finite() && self.w2.is_finite()) {
            return Err(invalid!("CRF kernel weights must be finite"));
        }
        Ok(())
    }
}

/// Clamp applied to scores before taking logarithms.
pub const UNARY_EPS: f64 = 1e-6;

/// Per-pixel `[ψ(0), ψ(1)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct UnaryField {
    width: usize,
    height: usize,
    data: Vec<[f64; 2]>,
}

impl UnaryField {
    pub fn new(width: usize, height: usize, data: Vec<[f64; 2]>) -> Result<Self> {
        if data.len() != width * height {
            return Err(invalid!("unary field has {} entries for {width}x{height}", data.len()));
        }
        if data.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::NonFinite("unary potential".to_string()));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_slice(&self) -> &[[f64; 2]] {
        &self.data
    }
}

/// `ψ(1) = −ln S`, `ψ(0) = −ln(1 − S)` with `S` clamped to `[ε, 1 − ε]`.
pub fn unary_from_scores(s: &ScoreMap) -> UnaryField {
    let data = s
        .as_slice()
        .iter()
        .map(|&v| {
            let v = v.clamp(UNARY_EPS, 1.0 - UNARY_EPS);
            [-math::ln(1.0 - v), -math::ln(v)]
        })
        .collect();
    UnaryField {
        width: s.width(),
        height: s.height(),
        data,
    }
}

pub fn pairwise_kernel(pi: (f64, f64), pj: (f64, f64), ci: [f64; 3], cj: [f64; 3], p: &CrfParams) -> f64 {
    let d2 = (pi.0 - pj.0) * (pi.0 - pj.0) + (pi.1 - pj.1) * (pi.1 - pj.1);
    let c2: f64 = (0..3).map(|k| (ci[k] - cj[k]) * (ci[k] - cj[k])).sum();
    p.w1 * math::exp(-d2 / (2.0 * p.theta_alpha * p.theta_alpha) - c2 / (2.0 * p.theta_beta * p.theta_beta))
        + p.w2 * math::exp(-d2 / (2.0 * p.theta_gamma * p.theta_gamma))
}

/// Per-pixel label distribution `[Q(0), Q(1)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalField {
    width: usize,
    height: usize,
    data: Vec<[f64; 2]>,
}

impl MarginalField {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_slice(&self) -> &[[f64; 2]] {
        &self.data
    }

    /// `Q(·, 1)` as a score map.
    pub fn foreground(&self) -> ScoreMap {
        let data = self.data.iter().map(|q| q[1].clamp(0.0, 1.0)).collect();
        ScoreMap::from_vec(self.width, self.height, data).expect("probabilities lie in [0, 1]")
    }
}

fn softmin(e: [f64; 2]) -> [f64; 2] {
    let m = e[0].min(e[1]);
    let a = math::exp(-(e[0] - m));
    let b = math::exp(-(e[1] - m));
    [a / (a + b), b / (a + b)]
}

fn check_shapes(unary: &UnaryField, image: &RgbImage) -> Result<()> {
    if unary.width != image.width() || unary.height != image.height() {
        return Err(invalid!(
            "unary field is {}x{} but the image is {}x{}",
            unary.width,
            unary.height,
            image.width(),
            image.height()
        ));
    }
    Ok(())
}

/// Kernel weights for one half of the window (offsets after the centre in
/// scan order); the other half follows by symmetry.
struct HalfWindow {
    offsets: Vec<(isize, isize)>,
    appearance: Vec<f64>,
    smoothness: Vec<f64>,
    /// `exp(−c² / 2θβ²)` for every integer squared colour distance.
    colour: Vec<f64>,
}

impl HalfWindow {
    fn new(p: &CrfParams) -> Self {
        let r = (p.window / 2) as isize;
        let mut offsets = Vec::new();
        for dy in 0..=r {
            for dx in -r..=r {
                if dy > 0 || dx > 0 {
                    offsets.push((dx, dy));
                }
            }
        }
        let d2 = |o: &(isize, isize)| (o.0 * o.0 + o.1 * o.1) as f64;
        let appearance = offsets
            .iter()
            .map(|o| p.w1 * math::exp(-d2(o) / (2.0 * p.theta_alpha * p.theta_alpha)))
            .collect();
        let smoothness = offsets
            .iter()
            .map(|o| p.w2 * math::exp(-d2(o) / (2.0 * p.theta_gamma * p.theta_gamma)))
            .collect();
        let colour = (0..=3 * 255 * 255)
            .map(|c| math::exp(-(c as f64) / (2.0 * p.theta_beta * p.theta_beta)))
            .collect();
        Self {
            offsets,
            appearance,
            smoothness,
            colour,
        }
    }

    fn kernel(&self, o: usize, a: [u8; 3], b: [u8; 3]) -> f64 {
        let c2: usize = (0..3).map(|k| (a[k] as isize - b[k] as isize).pow(2) as usize).sum();
        self.appearance[o] * self.colour[c2] + self.smoothness[o]
    }

    /// Calls `f(i, j, k)` for every unordered in-window pair.
    fn for_each_pair(&self, image: &RgbImage, mut f: impl FnMut(usize, usize, f64)) {
        let (w, h) = (image.width() as isize, image.height() as isize);
        for y in 0..h {
            for x in 0..w {
                let ci = image.get(x as usize, y as usize);
                let i = (y * w + x) as usize;
                for (o, &(dx, dy)) in self.offsets.iter().enumerate() {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || nx >= w || ny >= h {
                        continue;
                    }
                    let k = self.kernel(o, ci, image.get(nx as usize, ny as usize));
                    f(i, (ny * w + nx) as usize, k);
                }
            }
        }
    }
}

/// Synchronous mean-field updates
/// `Q_i(l) ∝ exp(−ψ_i(l) − Σ_j k(i, j) Q_j(1 − l))`, starting from the
/// normalized unary distribution.
pub fn meanfield_infer(unary: &UnaryField, image: &RgbImage, p: &CrfParams) -> Result<MarginalField> {
    p.validate()?;
    check_shapes(unary, image)?;
    let n = unary.data.len();
    let mut q: Vec<[f64; 2]> = unary.data.iter().map(|&e| softmin(e)).collect();
    if p.w1 != 0.0 || p.w2 != 0.0 {
        let half = HalfWindow::new(p);
        // Kernels are fixed across iterations; cache them when they fit.
        let pairs = n * half.offsets.len();
        let cached: Option<Vec<(u32, u32, f64)>> = (pairs <= 4_000_000).then(|| {
            let mut v = Vec::with_capacity(pairs);
            half.for_each_pair(image, |i, j, k| v.push((i as u32, j as u32, k)));
            v
        });
        let mut msg = vec![[0.0f64; 2]; n];
        for it in 0..p.iters {
            msg.iter_mut().for_each(|m| *m = [0.0, 0.0]);
            let mut add = |i: usize, j: usize, k: f64| {
                msg[i][0] += k * q[j][1];
                msg[i][1] += k * q[j][0];
                msg[j][0] += k * q[i][1];
                msg[j][1] += k * q[i][0];
            };
            match &cached {
                Some(list) => list.iter().for_each(|&(i, j, k)| add(i as usize, j as usize, k)),
                None => half.for_each_pair(image, add),
            }
            for i in 0..n {
                let u = unary.data[i];
                q[i] = softmin([u[0] + msg[i][0], u[1] + msg[i][1]]);
                if !(q[i][0].is_finite() && q[i][1].is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "mean-field iteration {it}, pixel {i}: unary {:?}, message {:?}",
                        u, msg[i]
                    )));
                }
            }
        }
    }
    Ok(MarginalField {
        width: unary.width,
        height: unary.height,
        data: q,
    })
}

/// Per-pixel argmax; ties go to label 0.
pub fn map_labels(q: &MarginalField) -> BinaryMask {
    let data = q.data.iter().map(|v| u8::from(v[1] > v[0])).collect();
    BinaryMask::from_vec(q.width, q.height, data).expect("one label per pixel")
}

/// Energy of a labelling under the windowed model.
pub fn energy(labels: &BinaryMask, unary: &UnaryField, image: &RgbImage, p: &CrfParams) -> Result<f64> {
    p.validate()?;
    check_shapes(unary, image)?;
    if labels.width() != unary.width || labels.height() != unary.height {
        return Err(invalid!("labelling size differs from the unary field"));
    }
    let l = labels.as_slice();
    let mut e: f64 = unary.data.iter().zip(l).map(|(u, &x)| u[x as usize]).sum();
    HalfWindow::new(p).for_each_pair(image, |i, j, k| {
        if l[i] != l[j] {
            e += k;
        }
    });
    Ok(e)
}

/// Exact marginals and MAP labelling by enumerating all labellings.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactSolution {
    pub marginals: MarginalField,
    pub map: BinaryMask,
    pub map_energy: f64,
}

/// Largest pixel count accepted by [`exact_infer_bruteforce`].
pub const BRUTE_FORCE_LIMIT: usize = 20;

pub fn exact_infer_bruteforce(unary: &UnaryField, image: &RgbImage, p: &CrfParams) -> Result<ExactSolution> {
    p.validate()?;
    check_shapes(unary, image)?;
    let n = unary.data.len();
    if n > BRUTE_FORCE_LIMIT {
        return Err(invalid!("{n} pixels exceed the enumeration limit of {BRUTE_FORCE_LIMIT}"));
    }
    let mut pairs = Vec::new();
    HalfWindow::new(p).for_each_pair(image, |i, j, k| pairs.push((i, j, k)));
    let states = 1usize << n;
    let mut energies = Vec::with_capacity(states);
    for s in 0..states {
        let bit = |i: usize| (s >> i) & 1;
        let mut e: f64 = (0..n).map(|i| unary.data[i][bit(i)]).sum();
        for &(i, j, k) in &pairs {
            if bit(i) != bit(j) {
                e += k;
            }
        }
        energies.push(e);
    }
    let (best, &map_energy) = energies
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("at least one state");
    let mut weight = vec![0.0f64; n];
    let mut z = 0.0;
    for (s, &e) in energies.iter().enumerate() {
        let g = math::exp(-(e - map_energy));
        z += g;
        for (i, wi) in weight.iter_mut().enumerate() {
            if (s >> i) & 1 == 1 {
                *wi += g;
            }
        }
    }
    let data = weight.iter().map(|&w1| [1.0 - w1 / z, w1 / z]).collect();
    let map = BinaryMask::from_vec(unary.width, unary.height, (0..n).map(|i| ((best >> i) & 1) as u8).collect())?;
    Ok(ExactSolution {
        marginals: MarginalField {
            width: unary.width,
            height: unary.height,
            data,
        },
        map,
        map_energy,
    })
}

/// Unary from `s_in`, mean-field inference, argmax.
pub fn refine(s_in: &ScoreMap, image: &RgbImage, p: &CrfParams) -> Result<BinaryMask> {
    let q = meanfield_infer(&unary_from_scores(s_in), image, p)?;
    Ok(map_labels(&q))
}
