//! Named parameter storage and the Adadelta optimizer.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::math;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamTensor {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// An ordered set of named tensors. Gradients use the same type with the
/// same layout as the parameters they belong to.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    tensors: Vec<ParamTensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn register(&mut self, name: String, shape: Vec<usize>) -> usize {
        let n = shape.iter().product();
        self.tensors.push(ParamTensor {
            name,
            shape,
            data: vec![0.0; n],
        });
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(ParamTensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.tensors.iter_mut()
    }

    #[inline]
    pub fn get(&self, idx: usize) -> &[f64] {
        &self.tensors[idx].data
    }

    #[inline]
    pub fn get_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.tensors[idx].data
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn zeros_like(&self) -> Params {
        Params {
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: vec![0.0; t.data.len()],
                })
                .collect(),
        }
    }

    /// Accumulates `scale * other` into `self`; layouts must match.
    pub fn add_scaled(&mut self, other: &Params, scale: f64) -> Result<()> {
        self.check_layout(other)?;
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Copies values from `other` for every tensor whose name and shape
    /// match; returns how many tensors were copied.
    pub fn copy_matching(&mut self, other: &Params) -> usize {
        let mut copied = 0;
        for t in &mut self.tensors {
            if let Some(src) = other.by_name(&t.name) {
                if src.shape == t.shape {
                    t.data.copy_from_slice(&src.data);
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Replaces all values, requiring an identical name/shape layout.
    pub fn load_from(&mut self, other: &Params) -> Result<()> {
        self.check_layout(other)?;
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.data.copy_from_slice(&b.data);
        }
        Ok(())
    }

    pub fn from_tensors(tensors: Vec<ParamTensor>) -> Result<Params> {
        for t in &tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(invalid!("parameter {} has inconsistent shape", t.name));
            }
        }
        Ok(Params { tensors })
    }

    fn check_layout(&self, other: &Params) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(invalid!(
                "parameter sets differ in length ({} vs {})",
                self.tensors.len(),
                other.tensors.len()
            ));
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.name != b.name || a.shape != b.shape {
                return Err(invalid!("parameter layout mismatch at {} / {}", a.name, b.name));
            }
        }
        Ok(())
    }
}

/// Adadelta (Zeiler, 2012) with an optional global learning-rate multiplier:
///
/// ```text
/// E[g²]  ← ρ E[g²] + (1 − ρ) g²
/// Δx     ← −√(E[Δx²] + ε) / √(E[g²] + ε) · g
/// E[Δx²] ← ρ E[Δx²] + (1 − ρ) Δx²
/// x      ← x + lr · Δx
/// ```
#[derive(Clone, Debug)]
pub struct Adadelta {
    pub rho: f64,
    pub eps: f64,
    pub lr: f64,
    sq_grad: Vec<Vec<f64>>,
    sq_delta: Vec<Vec<f64>>,
}

impl Adadelta {
    pub fn new(params: &Params, rho: f64, eps: f64, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            rho,
            eps,
            lr,
            sq_grad: zeros.clone(),
            sq_delta: zeros,
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params) -> Result<()> {
        params.check_layout(grads)?;
        if self.sq_grad.len() != params.len() {
            return Err(Error::State("optimizer built for a different parameter set".into()));
        }
        let (rho, eps, lr) = (self.rho, self.eps, self.lr);
        for (ti, (p, g)) in params.tensors.iter_mut().zip(&grads.tensors).enumerate() {
            let eg = &mut self.sq_grad[ti];
            let ed = &mut self.sq_delta[ti];
            for i in 0..p.data.len() {
                let gi = g.data[i];
                eg[i] = rho * eg[i] + (1.0 - rho) * gi * gi;
                let delta = -math::sqrt(ed[i] + eps) / math::sqrt(eg[i] + eps) * gi;
                ed[i] = rho * ed[i] + (1.0 - rho) * delta * delta;
                p.data[i] += lr * delta;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adadelta_first_step_matches_hand_update() {
        let mut p = Params::new();
        let i = p.register("x".into(), vec![1]);
        p.get_mut(i)[0] = 1.0;
        let mut g = p.zeros_like();
        g.get_mut(i)[0] = 2.0;
        let mut opt = Adadelta::new(&p, 0.9, 1e-6, 1.0);
        opt.step(&mut p, &g).unwrap();
        // E[g²] = 0.1 * 4 = 0.4; Δx = −√1e-6 / √(0.4 + 1e-6) · 2
        let expect = 1.0 - (1e-6f64).sqrt() / (0.4f64 + 1e-6).sqrt() * 2.0;
        assert!((p.get(i)[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn adadelta_descends_a_quadratic() {
        let mut p = Params::new();
        let i = p.register("x".into(), vec![2]);
        p.get_mut(i).copy_from_slice(&[3.0, -2.0]);
        let mut opt = Adadelta::new(&p, 0.95, 1e-4, 1.0);
        for _ in 0..2000 {
            let mut g = p.zeros_like();
            let x = p.get(i).to_vec();
            g.get_mut(i).copy_from_slice(&[2.0 * x[0], 2.0 * x[1]]);
            opt.step(&mut p, &g).unwrap();
        }
        assert!(p.get(i).iter().all(|v| v.abs() < 0.5));
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let mut a = Params::new();
        a.register("a".into(), vec![2]);
        let mut b = Params::new();
        b.register("b".into(), vec![2]);
        assert!(a.add_scaled(&b, 1.0).is_err());
        assert!(a.load_from(&b).is_err());
    }
}
