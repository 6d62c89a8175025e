//! Integrated score map: match evidence spread over superpixels, backbone
//! scores restricted to matched proposals, and a logistic fusion of both.

use alloc::vec;

use crate::error::{invalid, Result};
use crate::image::ScoreMap;
use crate::keypoint::MatchSet;
use crate::math;
use crate::proposal::BBox;
use crate::superpixel::SuperpixelLabels;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// `S_in = σ(φ · (α S_sp + β S_p + γ))`.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct FusionParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub phi: f64,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: -0.5,
            phi: 4.0,
        }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.phi > 0.0) {
            return Err(invalid!("phi must be positive, got {}", self.phi));
        }
        Ok(())
    }
}

/// Every pixel sharing a superpixel with a matched point takes that point's
/// score; when several points hit one region the largest score wins.
pub fn project_matches(labels: &SuperpixelLabels, matches: &MatchSet) -> Result<ScoreMap> {
    let (w, h) = (labels.width(), labels.height());
    let mut region = vec![0.0f64; labels.count()];
    for p in &matches.points {
        if p.x >= w || p.y >= h {
            return Err(invalid!("matched point ({}, {}) outside {w}x{h}", p.x, p.y));
        }
        let r = &mut region[labels.get(p.x, p.y) as usize];
        *r = r.max(p.score.clamp(0.0, 1.0));
    }
    let data = labels.as_slice().iter().map(|&l| region[l as usize]).collect();
    ScoreMap::from_vec(w, h, data)
}

/// `S` inside the union of `boxes`, zero elsewhere.
pub fn proposal_score_mask(s: &ScoreMap, boxes: &[BBox]) -> Result<ScoreMap> {
    let (w, h) = (s.width(), s.height());
    let mut inside = vec![false; w * h];
    for b in boxes {
        if !b.fits(w, h) {
            return Err(invalid!("box {:?} outside {w}x{h}", <[usize; 4]>::from(*b)));
        }
        for y in b.y1..b.y2 {
            inside[y * w + b.x1..y * w + b.x2].iter_mut().for_each(|v| *v = true);
        }
    }
    let data = s.as_slice().iter().zip(&inside).map(|(&v, &i)| if i { v } else { 0.0 }).collect();
    ScoreMap::from_vec(w, h, data)
}

pub fn integrate(s_sp: &ScoreMap, s_p: &ScoreMap, params: &FusionParams) -> Result<ScoreMap> {
    params.validate()?;
    if s_sp.width() != s_p.width() || s_sp.height() != s_p.height() {
        return Err(invalid!(
            "score maps differ in size: {}x{} vs {}x{}",
            s_sp.width(),
            s_sp.height(),
            s_p.width(),
            s_p.height()
        ));
    }
    let data = s_sp
        .as_slice()
        .iter()
        .zip(s_p.as_slice())
        .map(|(&a, &b)| math::sigmoid(params.phi * (params.alpha * a + params.beta * b + params.gamma)))
        .collect();
    ScoreMap::from_vec(s_sp.width(), s_sp.height(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keypoint::MatchedPoint;
    use alloc::vec::Vec;

    fn stripes() -> SuperpixelLabels {
        // 4×2 image, regions are columns pairs: 0 0 1 1 / 2 2 3 3
        SuperpixelLabels::new(4, 2, vec![0, 0, 1, 1, 2, 2, 3, 3]).unwrap()
    }

    fn points(list: &[(usize, usize, f64)]) -> MatchSet {
        MatchSet {
            points: list.iter().map(|&(x, y, score)| MatchedPoint { x, y, score }).collect(),
            lines: Vec::new(),
        }
    }

    #[test]
    fn no_matches_project_to_zero() {
        let s = project_matches(&stripes(), &MatchSet::default()).unwrap();
        assert!(s.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn match_fills_its_region() {
        let s = project_matches(&stripes(), &points(&[(3, 0, 0.8)])).unwrap();
        assert_eq!(s.as_slice(), &[0.0, 0.0, 0.8, 0.8, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn strongest_match_wins_a_region() {
        let s = project_matches(&stripes(), &points(&[(0, 1, 0.6), (1, 1, 0.9)])).unwrap();
        assert_eq!(s.get(0, 1), 0.9);
        assert_eq!(s.get(1, 1), 0.9);
    }

    #[test]
    fn proposal_mask_cases() {
        let s = ScoreMap::from_vec(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert!(proposal_score_mask(&s, &[]).unwrap().as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(proposal_score_mask(&s, &[BBox::new(0, 0, 3, 2).unwrap()]).unwrap(), s);
    }

    #[test]
    fn fusion_values() {
        let p = FusionParams::default();
        let zero = ScoreMap::zeros(2, 2);
        let one = ScoreMap::filled(2, 2, 1.0);
        let half = ScoreMap::filled(2, 2, 0.5);
        assert!((integrate(&zero, &zero, &p).unwrap().get(0, 0) - 0.119_202_922).abs() < 1e-6);
        assert!((integrate(&one, &one, &p).unwrap().get(1, 1) - 0.997_527_376).abs() < 1e-6);
        assert_eq!(integrate(&half, &zero, &p).unwrap().get(0, 1), 0.5);
        assert!(integrate(&zero, &ScoreMap::zeros(3, 2), &p).is_err());
    }
}
