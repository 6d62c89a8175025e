//! Convolution, pooling and resampling layers with hand-written backward
//! passes.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::params::Params;
use crate::error::{invalid, Result};
use crate::math;
use crate::tensor::{gemm, MatRef, Tensor};

/// Upper bound on the im2col scratch buffer, in values. Convolutions over
/// large maps are processed in horizontal bands to stay below it.
const BAND_BUDGET: usize = 1 << 21;

/// A bank of `out × inp` square `k × k` filters, stored `[out][inp][ky][kx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    pub out: usize,
    pub inp: usize,
    pub k: usize,
    pub weights: Vec<f64>,
}

impl FilterBank {
    pub fn new(out: usize, inp: usize, k: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != out * inp * k * k {
            return Err(invalid!("filter bank needs {} weights", out * inp * k * k));
        }
        Ok(Self { out, inp, k, weights })
    }

    /// One `k × k` filter mapping one channel to one channel.
    pub fn single(k: usize, weights: Vec<f64>) -> Result<Self> {
        Self::new(1, 1, k, weights)
    }
}

/// Atrous (dilated) convolution with zero padding:
///
/// `y(i, j) = Σ_{k1,k2} w(k1, k2) · x(i + rate·k1, j + rate·k2)`,
/// `k1, k2 ∈ [−⌊K/2⌋, ⌊K/2⌋]`, summed over input channels.
///
/// This is the direct definition; network layers use the equivalent im2col
/// formulation in [`Conv2d`].
pub fn atrous_conv2d(x: &Tensor, filters: &FilterBank, rate: usize) -> Result<Tensor> {
    if rate == 0 {
        return Err(invalid!("atrous rate must be positive"));
    }
    if filters.k == 0 || filters.k % 2 == 0 {
        return Err(invalid!("filter size must be odd, got {}", filters.k));
    }
    if filters.inp != x.channels() {
        return Err(invalid!(
            "filter expects {} input channels, tensor has {}",
            filters.inp,
            x.channels()
        ));
    }
    if x.spatial() == 0 {
        return Err(invalid!("empty input"));
    }
    if !x.is_finite() {
        return Err(invalid!("input contains non-finite values"));
    }
    let (h, w) = (x.height() as isize, x.width() as isize);
    let k = filters.k;
    let half = (k / 2) as isize;
    let r = rate as isize;
    let mut y = Tensor::zeros(filters.out, x.height(), x.width());
    for o in 0..filters.out {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for ci in 0..filters.inp {
                    for k1 in -half..=half {
                        let si = i + r * k1;
                        if si < 0 || si >= h {
                            continue;
                        }
                        for k2 in -half..=half {
                            let sj = j + r * k2;
                            if sj < 0 || sj >= w {
                                continue;
                            }
                            let widx = ((o * filters.inp + ci) * k + (k1 + half) as usize) * k
                                + (k2 + half) as usize;
                            acc += filters.weights[widx] * x.at(ci, si as usize, sj as usize);
                        }
                    }
                }
                y.set(o, i as usize, j as usize, acc);
            }
        }
    }
    Ok(y)
}

/// Stride-1 "same" convolution layer with dilation and bias.
#[derive(Clone, Debug)]
pub(crate) struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub dilation: usize,
    pub weight: usize,
    pub bias: usize,
}

impl Conv2d {
    pub fn new(
        params: &mut Params,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        dilation: usize,
    ) -> Self {
        let weight = params.register(format!("{name}.weight"), vec![out_ch, in_ch, k, k]);
        let bias = params.register(format!("{name}.bias"), vec![out_ch]);
        Self {
            in_ch,
            out_ch,
            k,
            dilation,
            weight,
            bias,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    fn band_rows(&self, w: usize) -> usize {
        (BAND_BUDGET / (self.fan_in() * w).max(1)).max(1)
    }

    pub fn forward(&self, p: &Params, x: &Tensor) -> Tensor {
        debug_assert_eq!(x.channels(), self.in_ch);
        let (h, w) = (x.height(), x.width());
        let hw = h * w;
        let wt = p.get(self.weight);
        let bias = p.get(self.bias);
        let mut y = Tensor::zeros(self.out_ch, h, w);
        if self.k == 1 {
            gemm(
                self.out_ch,
                self.in_ch,
                hw,
                1.0,
                MatRef::rows(wt, self.in_ch),
                MatRef::rows(x.data(), hw),
                0.0,
                y.data_mut(),
                hw,
            );
        } else {
            let rows = self.band_rows(w);
            let mut col = Vec::new();
            let mut r0 = 0;
            while r0 < h {
                let r1 = (r0 + rows).min(h);
                let bn = (r1 - r0) * w;
                self.im2col(x, r0, r1, &mut col);
                gemm(
                    self.out_ch,
                    self.fan_in(),
                    bn,
                    1.0,
                    MatRef::rows(wt, self.fan_in()),
                    MatRef::rows(&col, bn),
                    0.0,
                    &mut y.data_mut()[r0 * w..],
                    hw,
                );
                r0 = r1;
            }
        }
        for o in 0..self.out_ch {
            let b = bias[o];
            for v in y.plane_mut(o) {
                *v += b;
            }
        }
        y
    }

    /// Accumulates weight/bias gradients into `g`; returns the input
    /// gradient when `need_dx`.
    pub fn backward(
        &self,
        p: &Params,
        x: &Tensor,
        dy: &Tensor,
        g: &mut Params,
        need_dx: bool,
    ) -> Option<Tensor> {
        let (h, w) = (x.height(), x.width());
        let hw = h * w;
        {
            let db = g.get_mut(self.bias);
            for o in 0..self.out_ch {
                db[o] += dy.plane(o).iter().sum::<f64>();
            }
        }
        let wt = p.get(self.weight);
        if self.k == 1 {
            gemm(
                self.out_ch,
                hw,
                self.in_ch,
                1.0,
                MatRef::rows(dy.data(), hw),
                MatRef::trans(x.data(), hw),
                1.0,
                g.get_mut(self.weight),
                self.in_ch,
            );
            if !need_dx {
                return None;
            }
            let mut dx = Tensor::zeros(self.in_ch, h, w);
            gemm(
                self.in_ch,
                self.out_ch,
                hw,
                1.0,
                MatRef::trans(wt, self.in_ch),
                MatRef::rows(dy.data(), hw),
                0.0,
                dx.data_mut(),
                hw,
            );
            return Some(dx);
        }
        let rows = self.band_rows(w);
        let fan = self.fan_in();
        let mut col = Vec::new();
        let mut dcol = vec![0.0; 0];
        let mut dx = if need_dx { Some(Tensor::zeros(self.in_ch, h, w)) } else { None };
        let mut r0 = 0;
        while r0 < h {
            let r1 = (r0 + rows).min(h);
            let bn = (r1 - r0) * w;
            self.im2col(x, r0, r1, &mut col);
            let dy_band = MatRef::strided(&dy.data()[r0 * w..], hw, 1);
            gemm(
                self.out_ch,
                bn,
                fan,
                1.0,
                dy_band,
                MatRef::trans(&col, bn),
                1.0,
                g.get_mut(self.weight),
                fan,
            );
            if let Some(dx) = dx.as_mut() {
                dcol.clear();
                dcol.resize(fan * bn, 0.0);
                gemm(fan, self.out_ch, bn, 1.0, MatRef::trans(wt, fan), dy_band, 0.0, &mut dcol, bn);
                self.col2im(&dcol, r0, r1, dx);
            }
            r0 = r1;
        }
        dx
    }

    /// Fills `col` with the `(in·k·k) × ((r1 − r0)·w)` patch matrix for
    /// output rows `[r0, r1)`.
    fn im2col(&self, x: &Tensor, r0: usize, r1: usize, col: &mut Vec<f64>) {
        let (h, w) = (x.height() as isize, x.width());
        let bn = (r1 - r0) * w;
        col.clear();
        col.resize(self.fan_in() * bn, 0.0);
        let k = self.k;
        let half = (k / 2) as isize;
        let d = self.dilation as isize;
        for ci in 0..self.in_ch {
            let plane = x.plane(ci);
            for ky in 0..k {
                let oy = (ky as isize - half) * d;
                for kx in 0..k {
                    let ox = (kx as isize - half) * d;
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * bn..(row + 1) * bn];
                    let (xlo, xhi) = valid_range(w, ox);
                    if xlo >= xhi {
                        continue;
                    }
                    for y in r0..r1 {
                        let sy = y as isize + oy;
                        if sy < 0 || sy >= h {
                            continue;
                        }
                        let src = sy as usize * w;
                        let base = (y - r0) * w;
                        let sx0 = (xlo as isize + ox) as usize;
                        dst[base + xlo..base + xhi]
                            .copy_from_slice(&plane[src + sx0..src + sx0 + (xhi - xlo)]);
                    }
                }
            }
        }
    }

    fn col2im(&self, dcol: &[f64], r0: usize, r1: usize, dx: &mut Tensor) {
        let (h, w) = (dx.height() as isize, dx.width());
        let bn = (r1 - r0) * w;
        let k = self.k;
        let half = (k / 2) as isize;
        let d = self.dilation as isize;
        for ci in 0..self.in_ch {
            let plane = dx.plane_mut(ci);
            for ky in 0..k {
                let oy = (ky as isize - half) * d;
                for kx in 0..k {
                    let ox = (kx as isize - half) * d;
                    let row = (ci * k + ky) * k + kx;
                    let src = &dcol[row * bn..(row + 1) * bn];
                    let (xlo, xhi) = valid_range(w, ox);
                    if xlo >= xhi {
                        continue;
                    }
                    for y in r0..r1 {
                        let sy = y as isize + oy;
                        if sy < 0 || sy >= h {
                            continue;
                        }
                        let dst = sy as usize * w;
                        let base = (y - r0) * w;
                        let sx0 = (xlo as isize + ox) as usize;
                        for (a, b) in plane[dst + sx0..dst + sx0 + (xhi - xlo)]
                            .iter_mut()
                            .zip(&src[base + xlo..base + xhi])
                        {
                            *a += b;
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `x` for which `x + offset` is inside `[0, w)`.
fn valid_range(w: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (w as isize - offset).clamp(0, w as isize) as usize;
    (lo.min(w), hi)
}

pub(crate) fn relu_inplace(x: &mut Tensor) {
    for v in x.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Masks `dy` by the positive part of the ReLU output `y`.
pub(crate) fn relu_backward(y: &Tensor, dy: &mut Tensor) {
    for (g, &v) in dy.data_mut().iter_mut().zip(y.data()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2×2 max pooling with stride 2. Returns the pooled tensor and, for every
/// output value, the flat in-plane index of the winning input.
pub(crate) fn maxpool2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (c, h, w) = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros(c, oh, ow);
    let mut idx = vec![0u32; c * oh * ow];
    for ch in 0..c {
        let plane = x.plane(ch);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (oy * 2) * w + ox * 2;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = (oy * 2 + dy) * w + ox * 2 + dx;
                    if plane[j] > plane[best] {
                        best = j;
                    }
                }
                let o = (ch * oh + oy) * ow + ox;
                y.data_mut()[o] = plane[best];
                idx[o] = best as u32;
            }
        }
    }
    (y, idx)
}

pub(crate) fn maxpool2_backward(dy: &Tensor, idx: &[u32], in_h: usize, in_w: usize) -> Tensor {
    let c = dy.channels();
    let n = dy.spatial();
    let mut dx = Tensor::zeros(c, in_h, in_w);
    for ch in 0..c {
        let plane = dx.plane_mut(ch);
        for i in 0..n {
            plane[idx[ch * n + i] as usize] += dy.data()[ch * n + i];
        }
    }
    dx
}

/// Two-tap interpolation weights along one axis (half-pixel aligned).
fn taps(src: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..src * factor)
        .map(|o| {
            let s = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (math::floor(s) as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear upsampling by an integer factor.
pub(crate) fn upsample_bilinear(x: &Tensor, factor: usize) -> Tensor {
    let (c, h, w) = x.shape();
    let ys = taps(h, factor);
    let xs = taps(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    let mut y = Tensor::zeros(c, oh, ow);
    for ch in 0..c {
        let src = x.plane(ch);
        let dst = y.plane_mut(ch);
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    y
}

pub(crate) fn upsample_bilinear_backward(dy: &Tensor, in_h: usize, in_w: usize, factor: usize) -> Tensor {
    let c = dy.channels();
    let ys = taps(in_h, factor);
    let xs = taps(in_w, factor);
    let ow = in_w * factor;
    let mut dx = Tensor::zeros(c, in_h, in_w);
    for ch in 0..c {
        let src = dy.plane(ch);
        let dst = dx.plane_mut(ch);
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let g = src[oy * ow + ox];
                dst[y0 * in_w + x0] += g * (1.0 - fx) * (1.0 - fy);
                dst[y0 * in_w + x1] += g * fx * (1.0 - fy);
                dst[y1 * in_w + x0] += g * (1.0 - fx) * fy;
                dst[y1 * in_w + x1] += g * fx * fy;
            }
        }
    }
    dx
}

/// Spatial mean per channel, as a `c × 1 × 1` tensor.
pub(crate) fn global_avg_pool(x: &Tensor) -> Tensor {
    let n = x.spatial() as f64;
    let data = (0..x.channels()).map(|ch| x.plane(ch).iter().sum::<f64>() / n).collect();
    Tensor::from_vec(x.channels(), 1, 1, data).expect("shape")
}

/// Gradient of a `c × 1 × 1` value broadcast to `h × w`: spatial sum.
pub(crate) fn broadcast_backward(dy: &Tensor) -> Tensor {
    let data = (0..dy.channels()).map(|ch| dy.plane(ch).iter().sum()).collect();
    Tensor::from_vec(dy.channels(), 1, 1, data).expect("shape")
}

pub(crate) fn broadcast(x: &Tensor, h: usize, w: usize) -> Tensor {
    let mut y = Tensor::zeros(x.channels(), h, w);
    for ch in 0..x.channels() {
        let v = x.data()[ch];
        y.plane_mut(ch).iter_mut().for_each(|t| *t = v);
    }
    y
}

/// Gradient of [`global_avg_pool`]: spread evenly over the plane.
pub(crate) fn global_avg_pool_backward(dy: &Tensor, h: usize, w: usize) -> Tensor {
    let mut dx = broadcast(dy, h, w);
    let n = (h * w) as f64;
    dx.data_mut().iter_mut().for_each(|v| *v /= n);
    dx
}

/// Concatenates tensors with equal spatial size along channels.
pub(crate) fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let (h, w) = (parts[0].height(), parts[0].width());
    if parts.iter().any(|t| t.height() != h || t.width() != w) {
        return Err(invalid!("concatenated tensors must share spatial size"));
    }
    let c = parts.iter().map(|t| t.channels()).sum();
    let mut data = Vec::with_capacity(c * h * w);
    for t in parts {
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(c, h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
        let data = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(c, h, w, data).unwrap()
    }

    #[test]
    fn pointwise_filter_scales() {
        let x = Tensor::filled(1, 3, 3, 1.0);
        let y = atrous_conv2d(&x, &FilterBank::single(1, vec![2.0]).unwrap(), 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn dilated_impulse_response() {
        let mut x = Tensor::zeros(1, 5, 5);
        x.set(0, 2, 2, 1.0);
        let y = atrous_conv2d(&x, &FilterBank::single(3, vec![1.0; 9]).unwrap(), 2).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let expect = if i % 2 == 0 && j % 2 == 0 { 1.0 } else { 0.0 };
                assert_eq!(y.at(0, i, j), expect, "({i},{j})");
            }
        }
    }

    #[test]
    fn rate_one_equals_dense_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, 1, 6, 7);
        let wts: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = atrous_conv2d(&x, &FilterBank::single(3, wts.clone()).unwrap(), 1).unwrap();
        for i in 0..6isize {
            for j in 0..7isize {
                let mut acc = 0.0;
                for a in 0..3isize {
                    for b in 0..3isize {
                        let (si, sj) = (i + a - 1, j + b - 1);
                        if (0..6).contains(&si) && (0..7).contains(&sj) {
                            acc += wts[(a * 3 + b) as usize] * x.at(0, si as usize, sj as usize);
                        }
                    }
                }
                assert!((y.at(0, i as usize, j as usize) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn atrous_rejects_bad_arguments() {
        let x = Tensor::zeros(1, 4, 4);
        let f = FilterBank::single(3, vec![0.0; 9]).unwrap();
        assert!(atrous_conv2d(&x, &f, 0).is_err());
        let even = FilterBank::single(2, vec![0.0; 4]).unwrap();
        assert!(atrous_conv2d(&x, &even, 1).is_err());
    }

    #[test]
    fn conv_layer_matches_direct_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (k, d) in [(3, 1), (3, 2), (3, 6), (1, 1)] {
            let mut p = Params::new();
            let conv = Conv2d::new(&mut p, "c", 3, 4, k, d);
            for v in p.get_mut(conv.weight) {
                *v = rng.gen_range(-1.0..1.0);
            }
            let x = random_tensor(&mut rng, 3, 9, 8);
            let y = conv.forward(&p, &x);
            let bank = FilterBank::new(4, 3, k, p.get(conv.weight).to_vec()).unwrap();
            let expect = atrous_conv2d(&x, &bank, d).unwrap();
            for (a, b) in y.data().iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = Params::new();
        let conv = Conv2d::new(&mut p, "c", 2, 3, 3, 2);
        for t in p.iter_mut() {
            t.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
        let x = random_tensor(&mut rng, 2, 5, 6);
        let r = random_tensor(&mut rng, 3, 5, 6);
        let loss = |p: &Params, x: &Tensor| -> f64 {
            conv.forward(p, x).data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let mut g = p.zeros_like();
        let dx = conv.backward(&p, &x, &r, &mut g, true).unwrap();
        let h = 1e-6;
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-6);
        }
        for t in 0..2 {
            let idx = [conv.weight, conv.bias][t];
            for i in 0..p.get(idx).len() {
                let mut pp = p.clone();
                pp.get_mut(idx)[i] += h;
                let mut pm = p.clone();
                pm.get_mut(idx)[i] -= h;
                let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h);
                assert!((fd - g.get(idx)[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn banded_convolution_matches_single_band() {
        // A large input forces several bands.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = Params::new();
        let conv = Conv2d::new(&mut p, "c", 64, 2, 3, 1);
        for v in p.get_mut(conv.weight) {
            *v = rng.gen_range(-1.0..1.0);
        }
        let x = random_tensor(&mut rng, 64, 70, 64);
        assert!(conv.band_rows(64) < 70);
        let y = conv.forward(&p, &x);
        let bank = FilterBank::new(2, 64, 3, p.get(conv.weight).to_vec()).unwrap();
        let expect = atrous_conv2d(&x, &bank, 1).unwrap();
        for (a, b) in y.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&mut rng, 2, 3, 4);
        let dy = random_tensor(&mut rng, 2, 12, 16);
        let y = upsample_bilinear(&x, 4);
        let dx = upsample_bilinear_backward(&dy, 3, 4, 4);
        let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn upsample_preserves_constants() {
        let x = Tensor::filled(1, 2, 3, 0.25);
        assert!(upsample_bilinear(&x, 8).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn maxpool_routes_gradient_to_winner() {
        let x = Tensor::from_vec(1, 2, 2, vec![0.1, 0.9, 0.3, 0.2]).unwrap();
        let (y, idx) = maxpool2(&x);
        assert_eq!(y.data(), &[0.9]);
        let dx = maxpool2_backward(&Tensor::filled(1, 1, 1, 2.0), &idx, 2, 2);
        assert_eq!(dx.data(), &[0.0, 2.0, 0.0, 0.0]);
    }
}
