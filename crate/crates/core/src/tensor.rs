//! Dense channel-major (`c × h × w`) tensors and the matrix product used by
//! every layer.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};

/// A real tensor stored channel-major: element `(ch, y, x)` lives at
/// `ch * h * w + y * w + x`.
///
/// A spatial "fiber" or "descriptor" is the vector of all channel values at
/// one `(y, x)` position.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn filled(c: usize, h: usize, w: usize, value: f64) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![value; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(invalid!(
                "tensor data has {} values, shape {}x{}x{} needs {}",
                data.len(),
                c,
                h,
                w,
                c * h * w
            ));
        }
        Ok(Self { c, h, w, data })
    }

    /// Builds a tensor from position-major descriptors: `fibers[y * w + x]`
    /// is the channel vector at `(y, x)`.
    pub fn from_fibers(h: usize, w: usize, fibers: &[Vec<f64>]) -> Result<Self> {
        if fibers.len() != h * w || fibers.is_empty() {
            return Err(invalid!("expected {} fibers, got {}", h * w, fibers.len()));
        }
        let c = fibers[0].len();
        let mut t = Self::zeros(c, h, w);
        for (pos, fiber) in fibers.iter().enumerate() {
            if fiber.len() != c {
                return Err(invalid!("ragged fibers: {} vs {}", fiber.len(), c));
            }
            for (ch, &v) in fiber.iter().enumerate() {
                t.data[ch * h * w + pos] = v;
            }
        }
        Ok(t)
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.c
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.h
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.w
    }

    /// Number of spatial positions, `h * w`.
    #[inline]
    pub fn spatial(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, ch: usize, y: usize, x: usize) -> f64 {
        self.data[(ch * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, ch: usize, y: usize, x: usize, v: f64) {
        self.data[(ch * self.h + y) * self.w + x] = v;
    }

    pub fn plane(&self, ch: usize) -> &[f64] {
        let n = self.spatial();
        &self.data[ch * n..(ch + 1) * n]
    }

    pub fn plane_mut(&mut self, ch: usize) -> &mut [f64] {
        let n = self.spatial();
        &mut self.data[ch * n..(ch + 1) * n]
    }

    /// Channel vector at flat spatial position `pos`.
    pub fn fiber(&self, pos: usize) -> Vec<f64> {
        let n = self.spatial();
        (0..self.c).map(|ch| self.data[ch * n + pos]).collect()
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies channels `[start, end)` into a new tensor.
    pub fn channel_slice(&self, start: usize, end: usize) -> Result<Tensor> {
        if start >= end || end > self.c {
            return Err(invalid!("channel range {start}..{end} out of 0..{}", self.c));
        }
        let n = self.spatial();
        Tensor::from_vec(end - start, self.h, self.w, self.data[start * n..end * n].to_vec())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Strided read-only view of a row-major matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    /// Contiguous `rows × cols` matrix.
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a contiguous matrix that is stored `cols × rows`.
    pub fn trans(data: &'a [f64], stored_cols: usize) -> Self {
        Self {
            data,
            rs: 1,
            cs: stored_cols,
        }
    }

    pub fn strided(data: &'a [f64], rs: usize, cs: usize) -> Self {
        Self { data, rs, cs }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows > 0 && cols > 0 {
            let last = (rows - 1) * self.rs + (cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view exceeds its buffer");
        }
    }
}

/// `c = alpha * a · b + beta * c` with `a: m × k`, `b: k × n` and `c` an
/// `m × n` matrix with row stride `rsc` and unit column stride.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    a.check(m, k);
    b.check(k, n);
    assert!((m - 1) * rsc + n <= c.len(), "output view exceeds its buffer");
    if k == 0 {
        for i in 0..m {
            for v in &mut c[i * rsc..i * rsc + n] {
                *v *= beta;
            }
        }
        return;
    }
    // SAFETY: all three views were bounds-checked above against the extents
    // the kernel will touch, and `c` is borrowed mutably so it cannot alias
    // the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_product() {
        let a: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..20).map(|v| (v as f64).sin()).collect();
        let mut c = vec![0.0; 15];
        gemm(3, 4, 5, 1.0, MatRef::rows(&a, 4), MatRef::rows(&b, 5), 0.0, &mut c, 5);
        let expect = naive(3, 4, 5, &a, &b);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gemm_transposed_views() {
        // a stored 4x3, used as its 3x4 transpose
        let a_t: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let mut a = vec![0.0; 12];
        for i in 0..3 {
            for p in 0..4 {
                a[i * 4 + p] = a_t[p * 3 + i];
            }
        }
        let b: Vec<f64> = (0..8).map(|v| 1.0 + v as f64).collect();
        let mut c = vec![1.0; 6];
        gemm(3, 4, 2, 2.0, MatRef::trans(&a_t, 3), MatRef::rows(&b, 2), 1.0, &mut c, 2);
        let expect = naive(3, 4, 2, &a, &b);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - (2.0 * y + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::from_vec(2, 2, 2, vec![0.0; 7]).is_err());
    }

    #[test]
    fn fibers_round_trip() {
        let t = Tensor::from_fibers(1, 2, &[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(t.shape(), (2, 1, 2));
        assert_eq!(t.data(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(t.fiber(1), vec![3.0, 4.0]);
    }
}
