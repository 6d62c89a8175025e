//! Stage-two composition: proposal selection, keypoint matching over the
//! selected boxes, score fusion and CRF refinement.

use alloc::vec::Vec;

use crate::crf::{self, CrfParams};
use crate::error::{invalid, Result};
use crate::fusion::{self, FusionParams};
use crate::image::{BinaryMask, RgbImage, ScoreMap};
use crate::keypoint::{self, KeypointExtractor, MatchOutcome, MatchParams, MatchSet, Matcher};
use crate::proposal::{self, BBox, SelectionParams};
use crate::superpixel::{Segmenter, DEFAULT_REGIONS};

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct Stage2Config {
    pub selection: SelectionParams,
    pub matching: MatchParams,
    pub fusion: FusionParams,
    pub crf: CrfParams,
    /// Superpixel count; `None` uses the default, capped at the pixel count.
    pub superpixels: Option<usize>,
    /// Without the CRF the final mask is `S_in > 0.5`.
    pub use_crf: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            selection: SelectionParams::default(),
            matching: MatchParams::default(),
            fusion: FusionParams::default(),
            crf: CrfParams::default(),
            superpixels: None,
            use_crf: true,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        self.selection.validate()?;
        self.fusion.validate()?;
        self.crf.validate()?;
        if self.superpixels == Some(0) {
            return Err(invalid!("superpixel count must be positive"));
        }
        Ok(())
    }

    pub fn superpixel_count(&self, width: usize, height: usize) -> usize {
        self.superpixels
            .unwrap_or(DEFAULT_REGIONS)
            .clamp(1, (width * height).max(1))
    }
}

/// Every intermediate of one stage-two run.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Output {
    pub boxes: Vec<BBox>,
    pub matches: MatchSet,
    /// Selected boxes containing at least one matched point.
    pub matched: Vec<BBox>,
    pub s_sp: ScoreMap,
    pub s_p: ScoreMap,
    pub s_in: ScoreMap,
    pub mask: BinaryMask,
}

/// Plug-ins used by [`run_stage2`].
pub struct Stage2Plugins<'a> {
    pub extractor: &'a dyn KeypointExtractor,
    pub matcher: &'a dyn Matcher,
    pub segmenter: &'a dyn Segmenter,
}

/// Runs stage two on `scores`, the backbone map at image resolution.
pub fn run_stage2(
    image: &RgbImage,
    scores: &ScoreMap,
    proposals: &[BBox],
    plugins: &Stage2Plugins<'_>,
    cfg: &Stage2Config,
) -> Result<Stage2Output> {
    cfg.validate()?;
    let boxes = select(image, scores, proposals, cfg)?;
    let outcome = match_boxes(image, &boxes, plugins, cfg)?;
    let (s_sp, s_p, s_in) = fuse(image, scores, &outcome.matches, &outcome.matched, plugins, cfg)?;
    let mask = finalize(&s_in, image, cfg)?;
    Ok(Stage2Output {
        boxes,
        matches: outcome.matches,
        matched: outcome.matched,
        s_sp,
        s_p,
        s_in,
        mask,
    })
}

/// Proposal selection; proposals that do not fit the image are dropped.
pub fn select(image: &RgbImage, scores: &ScoreMap, proposals: &[BBox], cfg: &Stage2Config) -> Result<Vec<BBox>> {
    let (w, h) = (image.width(), image.height());
    if scores.width() != w || scores.height() != h {
        return Err(invalid!("score map is {}x{} but the image is {w}x{h}", scores.width(), scores.height()));
    }
    let proposals: Vec<BBox> = proposals.iter().filter(|b| b.fits(w, h)).copied().collect();
    proposal::select_proposals(scores, &proposals, &cfg.selection)
}

pub fn match_boxes(
    image: &RgbImage,
    boxes: &[BBox],
    plugins: &Stage2Plugins<'_>,
    cfg: &Stage2Config,
) -> Result<MatchOutcome> {
    keypoint::match_all_pairs(image, boxes, plugins.extractor, plugins.matcher, &cfg.matching)
}

/// Returns `(S_sp, S_p, S_in)`.
pub fn fuse(
    image: &RgbImage,
    scores: &ScoreMap,
    matches: &MatchSet,
    matched: &[BBox],
    plugins: &Stage2Plugins<'_>,
    cfg: &Stage2Config,
) -> Result<(ScoreMap, ScoreMap, ScoreMap)> {
    let (w, h) = (image.width(), image.height());
    let labels = plugins.segmenter.segment(image, cfg.superpixel_count(w, h))?;
    let s_sp = fusion::project_matches(&labels, matches)?;
    let s_p = fusion::proposal_score_mask(scores, matched)?;
    let s_in = fusion::integrate(&s_sp, &s_p, &cfg.fusion)?;
    Ok((s_sp, s_p, s_in))
}

/// Final mask from the integrated map: CRF refinement or a 0.5 threshold.
pub fn finalize(s_in: &ScoreMap, image: &RgbImage, cfg: &Stage2Config) -> Result<BinaryMask> {
    if cfg.use_crf {
        crf::refine(s_in, image, &cfg.crf)
    } else {
        Ok(s_in.threshold(0.5))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keypoint::{HarrisExtractor, MutualNnMatcher};
    use crate::superpixel::Slic;

    fn plugins<'a>(e: &'a HarrisExtractor, m: &'a MutualNnMatcher, s: &'a Slic) -> Stage2Plugins<'a> {
        Stage2Plugins {
            extractor: e,
            matcher: m,
            segmenter: s,
        }
    }

    #[test]
    fn no_proposals_gives_baseline_everywhere() {
        let img = RgbImage::from_fn(32, 32, |x, y| [(x * 8) as u8, (y * 8) as u8, 40]);
        let s = ScoreMap::filled(32, 32, 0.9);
        let (e, m, sl) = (HarrisExtractor::default(), MutualNnMatcher::default(), Slic::default());
        let cfg = Stage2Config {
            use_crf: false,
            ..Stage2Config::default()
        };
        let out = run_stage2(&img, &s, &[], &plugins(&e, &m, &sl), &cfg).unwrap();
        assert!(out.boxes.is_empty() && out.matches.is_empty());
        assert!(out.mask.is_empty());
        let base = 1.0 / (1.0 + libm::exp(2.0));
        assert!(out.s_in.as_slice().iter().all(|&v| (v - base).abs() < 1e-12));
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let img = RgbImage::new(16, 16);
        let (e, m, sl) = (HarrisExtractor::default(), MutualNnMatcher::default(), Slic::default());
        let r = run_stage2(&img, &ScoreMap::zeros(8, 8), &[], &plugins(&e, &m, &sl), &Stage2Config::default());
        assert!(r.is_err());
    }

    #[test]
    fn default_superpixel_count_is_capped_by_the_image() {
        let cfg = Stage2Config::default();
        assert_eq!(cfg.superpixel_count(512, 512), 512);
        assert_eq!(cfg.superpixel_count(128, 128), 512);
        assert_eq!(cfg.superpixel_count(4, 4), 16);
    }
}
