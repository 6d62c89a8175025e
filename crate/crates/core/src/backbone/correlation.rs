//! Self-correlation with spatial attention.
//!
//! Per feature level the network computes
//!
//! 1. `F̄ = L2_norm(F)` per spatial descriptor,
//! 2. `F̈ = λ·O + F̄` where `O` is softmax spatial attention over `F̄` with
//!    1×1 projections `f`, `g` (`c → c/8`) and `h` (`c → c`),
//! 3. the Gram matrix `C(m, n) = F̈(m)ᵀ F̈(n)` over all position pairs,
//! 4. the `T` largest values of every row in non-increasing order,
//! 5. `C̄ = L2_norm(max(C̃, 0))` per fiber.
//!
//! Tensors are channel-major, so a `c × h × w` tensor is also the row-major
//! `c × N` matrix with `N = h·w`, which is how the kernels below treat it.
//! Positions are flattened as `m = y·w + x`.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::Rng;

use crate::error::{invalid, Result};
use crate::math;
use crate::tensor::{gemm, MatRef, Tensor};

/// Divides every descriptor by its L2 norm. All-zero descriptors stay zero.
pub fn l2_normalize_descriptors(f: &Tensor) -> Tensor {
    l2_normalize_with_norms(f).0
}

pub(crate) fn l2_normalize_with_norms(f: &Tensor) -> (Tensor, Vec<f64>) {
    let (c, _, _) = f.shape();
    let n = f.spatial();
    let mut norms = vec![0.0; n];
    for ch in 0..c {
        for (acc, v) in norms.iter_mut().zip(f.plane(ch)) {
            *acc += v * v;
        }
    }
    norms.iter_mut().for_each(|v| *v = math::sqrt(*v));
    let mut out = f.clone();
    for ch in 0..c {
        for (v, &r) in out.plane_mut(ch).iter_mut().zip(&norms) {
            *v = if r > 0.0 { *v / r } else { 0.0 };
        }
    }
    (out, norms)
}

/// Backward of per-descriptor L2 normalization given the normalized output
/// `y` and the input norms.
pub(crate) fn l2_normalize_backward(y: &Tensor, norms: &[f64], dy: &Tensor) -> Tensor {
    let c = y.channels();
    let n = y.spatial();
    let mut dots = vec![0.0; n];
    for ch in 0..c {
        for ((acc, a), b) in dots.iter_mut().zip(y.plane(ch)).zip(dy.plane(ch)) {
            *acc += a * b;
        }
    }
    let mut dx = Tensor::zeros(c, y.height(), y.width());
    for ch in 0..c {
        let yp = y.plane(ch);
        let dyp = dy.plane(ch);
        for (i, v) in dx.plane_mut(ch).iter_mut().enumerate() {
            if norms[i] > 0.0 {
                *v = (dyp[i] - yp[i] * dots[i]) / norms[i];
            }
        }
    }
    dx
}

/// Owned parameters of one spatial attention block.
///
/// Projection matrices are stored output-major (`W_f` is `c/8 × c`), the
/// layout of a 1×1 convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub channels: usize,
    pub wf: Vec<f64>,
    pub bf: Vec<f64>,
    pub wg: Vec<f64>,
    pub bg: Vec<f64>,
    pub wh: Vec<f64>,
    pub bh: Vec<f64>,
    pub lambda: f64,
}

impl AttentionParams {
    /// All-zero projections and `λ = 0`.
    pub fn zeros(channels: usize) -> Result<Self> {
        if channels == 0 || channels % 8 != 0 {
            return Err(invalid!("attention needs channels divisible by 8, got {channels}"));
        }
        let c8 = channels / 8;
        Ok(Self {
            channels,
            wf: vec![0.0; c8 * channels],
            bf: vec![0.0; c8],
            wg: vec![0.0; c8 * channels],
            bg: vec![0.0; c8],
            wh: vec![0.0; channels * channels],
            bh: vec![0.0; channels],
            lambda: 0.0,
        })
    }

    /// Gaussian-free uniform init scaled by `1/√c`; `λ` stays 0.
    pub fn random<R: Rng>(channels: usize, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(channels)?;
        let s = 1.0 / math::sqrt(channels as f64);
        for v in p.wf.iter_mut().chain(p.wg.iter_mut()).chain(p.wh.iter_mut()) {
            *v = rng.gen_range(-s..s);
        }
        Ok(p)
    }

    pub(crate) fn view(&self) -> AttnView<'_> {
        AttnView {
            c: self.channels,
            wf: &self.wf,
            bf: &self.bf,
            wg: &self.wg,
            bg: &self.bg,
            wh: &self.wh,
            bh: &self.bh,
            lambda: self.lambda,
        }
    }
}

#[derive(Clone, Copy)]
pub(crate) struct AttnView<'a> {
    pub c: usize,
    pub wf: &'a [f64],
    pub bf: &'a [f64],
    pub wg: &'a [f64],
    pub bg: &'a [f64],
    pub wh: &'a [f64],
    pub bh: &'a [f64],
    pub lambda: f64,
}

impl AttnView<'_> {
    fn c8(&self) -> usize {
        self.c / 8
    }

    fn check(&self, fb: &Tensor) -> Result<()> {
        let (c, c8) = (self.c, self.c8());
        if fb.channels() != c
            || c % 8 != 0
            || self.wf.len() != c8 * c
            || self.wg.len() != c8 * c
            || self.wh.len() != c * c
            || self.bf.len() != c8
            || self.bg.len() != c8
            || self.bh.len() != c
        {
            return Err(invalid!(
                "attention parameters for {} channels do not fit a {}-channel map",
                c,
                fb.channels()
            ));
        }
        Ok(())
    }
}

pub(crate) struct AttnCache {
    f: Vec<f64>,
    g: Vec<f64>,
    h: Vec<f64>,
    beta: Vec<f64>,
    o: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct AttnGrads {
    pub wf: Vec<f64>,
    pub bf: Vec<f64>,
    pub wg: Vec<f64>,
    pub bg: Vec<f64>,
    pub wh: Vec<f64>,
    pub bh: Vec<f64>,
    pub lambda: f64,
}

/// `W x + b` for a `rows × c` weight over the `c × N` matrix `x`.
fn project(w: &[f64], b: &[f64], rows: usize, x: &Tensor) -> Vec<f64> {
    let (c, n) = (x.channels(), x.spatial());
    let mut out = vec![0.0; rows * n];
    gemm(rows, c, n, 1.0, MatRef::rows(w, c), MatRef::rows(x.data(), n), 0.0, &mut out, n);
    for r in 0..rows {
        out[r * n..(r + 1) * n].iter_mut().for_each(|v| *v += b[r]);
    }
    out
}

/// Row-wise softmax in place on an `n × n` matrix.
fn softmax_rows(s: &mut [f64], n: usize) {
    for row in s.chunks_exact_mut(n) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = math::exp(*v - max);
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
}

pub(crate) fn attention_forward(fb: &Tensor, p: AttnView<'_>) -> Result<(Tensor, AttnCache)> {
    p.check(fb)?;
    let (c, c8, n) = (p.c, p.c8(), fb.spatial());
    let f = project(p.wf, p.bf, c8, fb);
    let g = project(p.wg, p.bg, c8, fb);
    let h = project(p.wh, p.bh, c, fb);
    // s(m, n) = f(m)ᵀ g(n)
    let mut beta = vec![0.0; n * n];
    gemm(n, c8, n, 1.0, MatRef::trans(&f, n), MatRef::rows(&g, n), 0.0, &mut beta, n);
    softmax_rows(&mut beta, n);
    // o(:, m) = Σ_n β(m, n) h(:, n)
    let mut o = vec![0.0; c * n];
    gemm(c, n, n, 1.0, MatRef::rows(&h, n), MatRef::trans(&beta, n), 0.0, &mut o, n);
    let mut out = fb.clone();
    for (y, ov) in out.data_mut().iter_mut().zip(&o) {
        *y += p.lambda * ov;
    }
    Ok((out, AttnCache { f, g, h, beta, o }))
}

pub(crate) fn attention_backward(
    fb: &Tensor,
    p: AttnView<'_>,
    cache: &AttnCache,
    dout: &Tensor,
) -> (Tensor, AttnGrads) {
    let (c, c8, n) = (p.c, p.c8(), fb.spatial());
    let dlambda: f64 = dout.data().iter().zip(&cache.o).map(|(a, b)| a * b).sum();
    let d_o: Vec<f64> = dout.data().iter().map(|v| v * p.lambda).collect();

    let mut dh = vec![0.0; c * n];
    gemm(c, n, n, 1.0, MatRef::rows(&d_o, n), MatRef::rows(&cache.beta, n), 0.0, &mut dh, n);
    let mut ds = vec![0.0; n * n];
    gemm(n, c, n, 1.0, MatRef::trans(&d_o, n), MatRef::rows(&cache.h, n), 0.0, &mut ds, n);
    for (drow, brow) in ds.chunks_exact_mut(n).zip(cache.beta.chunks_exact(n)) {
        let dot: f64 = drow.iter().zip(brow).map(|(a, b)| a * b).sum();
        for (d, b) in drow.iter_mut().zip(brow) {
            *d = b * (*d - dot);
        }
    }
    let mut df = vec![0.0; c8 * n];
    gemm(c8, n, n, 1.0, MatRef::rows(&cache.g, n), MatRef::trans(&ds, n), 0.0, &mut df, n);
    let mut dg = vec![0.0; c8 * n];
    gemm(c8, n, n, 1.0, MatRef::rows(&cache.f, n), MatRef::rows(&ds, n), 0.0, &mut dg, n);

    let mut dfb = dout.clone();
    let mut lin_back = |dproj: &[f64], w: &[f64], rows: usize| -> (Vec<f64>, Vec<f64>) {
        let mut dw = vec![0.0; rows * c];
        gemm(rows, n, c, 1.0, MatRef::rows(dproj, n), MatRef::trans(fb.data(), n), 0.0, &mut dw, c);
        let db = dproj.chunks_exact(n).map(|r| r.iter().sum()).collect();
        gemm(c, rows, n, 1.0, MatRef::trans(w, c), MatRef::rows(dproj, n), 1.0, dfb.data_mut(), n);
        (dw, db)
    };
    let (dwf, dbf) = lin_back(&df, p.wf, c8);
    let (dwg, dbg) = lin_back(&dg, p.wg, c8);
    let (dwh, dbh) = lin_back(&dh, p.wh, c);
    (
        dfb,
        AttnGrads {
            wf: dwf,
            bf: dbf,
            wg: dwg,
            bg: dbg,
            wh: dwh,
            bh: dbh,
            lambda: dlambda,
        },
    )
}

/// Attention-reinforced descriptors `λ·O + F̄`.
pub fn spatial_attention(fb: &Tensor, params: &AttentionParams) -> Result<Tensor> {
    Ok(attention_forward(fb, params.view())?.0)
}

/// The attention matrix `β` (`N × N`, row `m` is a distribution over `n`).
pub fn attention_weights(fb: &Tensor, params: &AttentionParams) -> Result<Vec<f64>> {
    Ok(attention_forward(fb, params.view())?.1.beta)
}

/// Row-major `N × N` Gram matrix of the descriptors.
pub(crate) fn gram(f: &Tensor) -> Vec<f64> {
    let (c, n) = (f.channels(), f.spatial());
    let mut out = vec![0.0; n * n];
    gemm(n, c, n, 1.0, MatRef::trans(f.data(), n), MatRef::rows(f.data(), n), 0.0, &mut out, n);
    out
}

/// Raw correlation volume: an `N × h × w` tensor whose channel `n` at
/// position `m` holds `F̈(m)ᵀ F̈(n)`.
pub fn self_correlation(f: &Tensor) -> Tensor {
    let n = f.spatial();
    let c = gram(f);
    let mut data = vec![0.0; n * n];
    for m in 0..n {
        for k in 0..n {
            data[k * n + m] = c[m * n + k];
        }
    }
    Tensor::from_vec(n, f.height(), f.width(), data).expect("shape")
}

/// Order used for top-T selection: larger value first, ties broken by the
/// lower source index.
#[inline]
fn rank_order(values: &[f64], a: u32, b: u32) -> Ordering {
    values[b as usize]
        .partial_cmp(&values[a as usize])
        .unwrap_or(Ordering::Equal)
        .then(a.cmp(&b))
}

/// Indices of the `t` best entries of `row` in rank order.
pub(crate) fn top_t_indices(row: &[f64], t: usize, scratch: &mut Vec<u32>) -> Vec<u32> {
    scratch.clear();
    scratch.extend(0..row.len() as u32);
    if t < scratch.len() {
        scratch.select_nth_unstable_by(t - 1, |&a, &b| rank_order(row, a, b));
        scratch.truncate(t);
    }
    scratch.sort_unstable_by(|&a, &b| rank_order(row, a, b));
    scratch.clone()
}

/// Per position, the `t` largest correlation values in non-increasing
/// order. Input is a correlation volume as produced by [`self_correlation`].
pub fn top_t_pool(volume: &Tensor, t: usize) -> Result<Tensor> {
    let (k, h, w) = volume.shape();
    if t == 0 || t > k {
        return Err(invalid!("top-T needs 1 <= T <= {k} comparison locations, got {t}"));
    }
    let n = h * w;
    let mut out = Tensor::zeros(t, h, w);
    let mut row = vec![0.0; k];
    let mut scratch = Vec::new();
    for m in 0..n {
        for (j, v) in row.iter_mut().enumerate() {
            *v = volume.data()[j * n + m];
        }
        for (ti, &j) in top_t_indices(&row, t, &mut scratch).iter().enumerate() {
            out.data_mut()[ti * n + m] = row[j as usize];
        }
    }
    Ok(out)
}

/// Rectifies each fiber and rescales it to unit L2 norm; fibers that are
/// entirely non-positive become zero.
pub fn zero_out_normalize(c: &Tensor) -> Tensor {
    let mut r = c.clone();
    for v in r.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    l2_normalize_descriptors(&r)
}

/// Concatenates the level-3, level-4 and level-5 correlation tensors along
/// channels, in that order.
pub fn skip_match_concat(levels: [&Tensor; 3]) -> Result<Tensor> {
    let s = levels[0].shape();
    if levels.iter().any(|t| t.shape() != s) {
        return Err(invalid!(
            "skip matching needs identical shapes, got {:?}, {:?}, {:?}",
            levels[0].shape(),
            levels[1].shape(),
            levels[2].shape()
        ));
    }
    super::layers::concat_channels(&levels)
}

/// Everything the backward pass of one level needs.
pub(crate) struct LevelCache {
    fb: Tensor,
    norms: Vec<f64>,
    attn: Option<AttnCache>,
    fdd: Tensor,
    /// `N × T`, row-major: selected raw correlation values.
    top_vals: Vec<f64>,
    top_idx: Vec<u32>,
    /// `N × T`: normalized output, position-major.
    cbar: Vec<f64>,
    rnorms: Vec<f64>,
    t: usize,
}

/// Feature map → `T × h × w` normalized correlation tensor.
pub(crate) fn level_forward(
    f: &Tensor,
    attn: Option<AttnView<'_>>,
    t: usize,
    include_self: bool,
) -> Result<(Tensor, LevelCache)> {
    let n = f.spatial();
    let available = if include_self { n } else { n.saturating_sub(1) };
    if t == 0 || t > available {
        return Err(invalid!(
            "top-T needs T <= {available} comparison locations (map is {}x{}), got {t}",
            f.height(),
            f.width()
        ));
    }
    let (fb, norms) = l2_normalize_with_norms(f);
    let (fdd, attn_cache) = match attn {
        Some(p) => {
            let (out, cache) = attention_forward(&fb, p)?;
            (out, Some(cache))
        }
        None => (fb.clone(), None),
    };
    let mut corr = gram(&fdd);
    if !include_self {
        for m in 0..n {
            corr[m * n + m] = f64::NEG_INFINITY;
        }
    }
    let mut top_vals = vec![0.0; n * t];
    let mut top_idx = vec![0u32; n * t];
    let mut scratch = Vec::new();
    for m in 0..n {
        let row = &corr[m * n..(m + 1) * n];
        for (ti, &j) in top_t_indices(row, t, &mut scratch).iter().enumerate() {
            top_vals[m * t + ti] = row[j as usize];
            top_idx[m * t + ti] = j;
        }
    }
    let mut cbar = vec![0.0; n * t];
    let mut rnorms = vec![0.0; n];
    for m in 0..n {
        let src = &top_vals[m * t..(m + 1) * t];
        let r = math::sqrt(src.iter().map(|v| v.max(0.0) * v.max(0.0)).sum());
        rnorms[m] = r;
        if r > 0.0 {
            for (d, &v) in cbar[m * t..(m + 1) * t].iter_mut().zip(src) {
                *d = v.max(0.0) / r;
            }
        }
    }
    let mut out = Tensor::zeros(t, f.height(), f.width());
    for m in 0..n {
        for ti in 0..t {
            out.data_mut()[ti * n + m] = cbar[m * t + ti];
        }
    }
    Ok((
        out,
        LevelCache {
            fb,
            norms,
            attn: attn_cache,
            fdd,
            top_vals,
            top_idx,
            cbar,
            rnorms,
            t,
        },
    ))
}

/// Backward of [`level_forward`]: gradient w.r.t. the raw feature map and,
/// when attention is present, its parameters.
pub(crate) fn level_backward(
    cache: &LevelCache,
    attn: Option<AttnView<'_>>,
    dout: &Tensor,
) -> (Tensor, Option<AttnGrads>) {
    let t = cache.t;
    let n = cache.fdd.spatial();
    let c = cache.fdd.channels();
    // zero-out + normalize
    let mut dtop = vec![0.0; n * t];
    for m in 0..n {
        let r = cache.rnorms[m];
        if r <= 0.0 {
            continue;
        }
        let y = &cache.cbar[m * t..(m + 1) * t];
        let dot: f64 = (0..t).map(|ti| y[ti] * dout.data()[ti * n + m]).sum();
        for ti in 0..t {
            if cache.top_vals[m * t + ti] > 0.0 {
                dtop[m * t + ti] = (dout.data()[ti * n + m] - y[ti] * dot) / r;
            }
        }
    }
    // scatter through the Gram matrix: C(m, j) = F̈(m)·F̈(j)
    let mut dfdd = Tensor::zeros(c, cache.fdd.height(), cache.fdd.width());
    let fd = cache.fdd.data();
    let dd = dfdd.data_mut();
    for m in 0..n {
        for ti in 0..t {
            let v = dtop[m * t + ti];
            if v == 0.0 {
                continue;
            }
            let j = cache.top_idx[m * t + ti] as usize;
            for ch in 0..c {
                dd[ch * n + m] += v * fd[ch * n + j];
                dd[ch * n + j] += v * fd[ch * n + m];
            }
        }
    }
    let (dfb, grads) = match (attn, cache.attn.as_ref()) {
        (Some(p), Some(ac)) => {
            let (dfb, g) = attention_backward(&cache.fb, p, ac, &dfdd);
            (dfb, Some(g))
        }
        _ => (dfdd, None),
    };
    (l2_normalize_backward(&cache.fb, &cache.norms, &dfb), grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
        let data = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(c, h, w, data).unwrap()
    }

    #[test]
    fn normalizes_three_four_five() {
        let f = Tensor::from_fibers(1, 2, &[vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap();
        let y = l2_normalize_descriptors(&f);
        assert!((y.fiber(0)[0] - 0.6).abs() < 1e-15);
        assert!((y.fiber(0)[1] - 0.8).abs() < 1e-15);
        assert_eq!(y.fiber(1), vec![0.0, 0.0]);
    }

    #[test]
    fn normalized_fiber_norms_are_zero_or_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut f = random_tensor(&mut rng, 16, 5, 5);
        for ch in 0..16 {
            f.set(ch, 1, 1, 0.0);
        }
        let y = l2_normalize_descriptors(&f);
        for m in 0..25 {
            let norm: f64 = y.fiber(m).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm.abs() < 1e-6 || (norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_lambda_attention_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fb = l2_normalize_descriptors(&random_tensor(&mut rng, 16, 4, 4));
        let p = AttentionParams::random(16, &mut rng).unwrap();
        assert_eq!(p.lambda, 0.0);
        assert_eq!(spatial_attention(&fb, &p).unwrap(), fb);
    }

    #[test]
    fn single_location_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fb = l2_normalize_descriptors(&random_tensor(&mut rng, 8, 1, 1));
        let mut p = AttentionParams::random(8, &mut rng).unwrap();
        p.lambda = 0.3;
        p.bh.iter_mut().for_each(|b| *b = 0.1);
        assert_eq!(attention_weights(&fb, &p).unwrap(), vec![1.0]);
        let out = spatial_attention(&fb, &p).unwrap();
        for o in 0..8 {
            let h: f64 = (0..8).map(|i| p.wh[o * 8 + i] * fb.data()[i]).sum::<f64>() + p.bh[o];
            assert!((out.data()[o] - (0.3 * h + fb.data()[o])).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_descriptors_get_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fb = l2_normalize_descriptors(&Tensor::from_fibers(2, 1, &[d.clone(), d]).unwrap());
        let p = AttentionParams::random(8, &mut rng).unwrap();
        let beta = attention_weights(&fb, &p).unwrap();
        assert!(beta.iter().all(|b| (b - 0.5).abs() < 1e-12));
    }

    #[test]
    fn attention_rejects_mismatched_channels() {
        let fb = Tensor::zeros(16, 2, 2);
        let p = AttentionParams::zeros(8).unwrap();
        assert!(spatial_attention(&fb, &p).is_err());
        assert!(AttentionParams::zeros(12).is_err());
    }

    #[test]
    fn gram_of_known_descriptors() {
        let fibers = [vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8], vec![-1.0, 2.0]];
        let f = Tensor::from_fibers(2, 2, &fibers).unwrap();
        let c = self_correlation(&f);
        for m in 0..4 {
            for k in 0..4 {
                let expect: f64 = fibers[m].iter().zip(&fibers[k]).map(|(a, b)| a * b).sum();
                assert!((c.data()[k * 4 + m] - expect).abs() < 1e-12);
            }
        }
        assert_eq!(c.data()[4], 0.0); // orthogonal pair (m=0, n=1)
    }

    #[test]
    fn top_t_examples() {
        let v = Tensor::from_vec(4, 1, 1, vec![0.9, 0.1, 0.5, 0.3]).unwrap();
        assert_eq!(top_t_pool(&v, 2).unwrap().data(), &[0.9, 0.5]);
        assert_eq!(top_t_pool(&v, 4).unwrap().data(), &[0.9, 0.5, 0.3, 0.1]);
        let flat = Tensor::filled(5, 1, 1, 0.25);
        assert_eq!(top_t_pool(&flat, 3).unwrap().data(), &[0.25; 3]);
        assert!(top_t_pool(&v, 5).is_err());
        assert!(top_t_pool(&v, 0).is_err());
    }

    #[test]
    fn zero_out_examples() {
        let c = Tensor::from_fibers(1, 3, &[vec![0.9, 0.5], vec![-1.0, -2.0], vec![-0.5, 0.5]]).unwrap();
        let y = zero_out_normalize(&c);
        assert!((y.fiber(0)[0] - 0.874157).abs() < 1e-5);
        assert!((y.fiber(0)[1] - 0.485643).abs() < 1e-5);
        assert_eq!(y.fiber(1), vec![0.0, 0.0]);
        assert_eq!(y.fiber(2), vec![0.0, 1.0]);
    }

    #[test]
    fn concat_orders_levels() {
        let a = Tensor::filled(4, 2, 2, 1.0);
        let b = Tensor::filled(4, 2, 2, 2.0);
        let c = Tensor::filled(4, 2, 2, 3.0);
        let out = skip_match_concat([&a, &b, &c]).unwrap();
        assert_eq!(out.shape(), (12, 2, 2));
        assert_eq!(out.channel_slice(0, 4).unwrap(), a);
        assert_eq!(out.channel_slice(8, 12).unwrap(), c);
        let same = skip_match_concat([&a, &a, &a]).unwrap();
        assert_eq!(same.fiber(3), vec![1.0; 12]);
        assert!(skip_match_concat([&a, &b, &Tensor::zeros(4, 2, 3)]).is_err());
    }

    #[test]
    fn excluding_self_drops_the_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = random_tensor(&mut rng, 8, 2, 2);
        let (with_self, _) = level_forward(&f, None, 4, true).unwrap();
        assert!(level_forward(&f, None, 4, false).is_err());
        let (without, cache) = level_forward(&f, None, 3, false).unwrap();
        assert_eq!(with_self.channels(), 4);
        for m in 0..4 {
            assert!(cache.top_idx[m * 3..m * 3 + 3].iter().all(|&j| j as usize != m));
        }
        assert_eq!(without.channels(), 3);
    }
}
