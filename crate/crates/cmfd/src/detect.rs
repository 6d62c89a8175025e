//! Batch detection with serialized intermediates and stage replay.
//!
//! Every map handed to a later stage is first rounded to its on-disk 16-bit
//! form, so re-running the downstream stages from the files reproduces the
//! final mask bit for bit.

use std::path::{Path, PathBuf};
use std::time::Instant;

use cmfd_core::backbone::Backbone;
use cmfd_core::keypoint::MatchSet;
use cmfd_core::pipeline;
use cmfd_core::{BBox, RgbImage, ScoreMap};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::io;
use crate::plugins::Registry;

/// Wall-clock milliseconds per stage; `None` for stages that did not run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub backbone: Option<f64>,
    pub selection: Option<f64>,
    pub matching: Option<f64>,
    pub fusion: Option<f64>,
    pub crf: Option<f64>,
}

/// Artifacts of one image. Paths are relative to the record's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub id: String,
    pub image: PathBuf,
    pub scores: PathBuf,
    /// Where the score map came from: `backbone` or an injected file.
    pub score_source: String,
    pub proposals: Option<PathBuf>,
    pub boxes: Vec<BBox>,
    pub matched: Vec<BBox>,
    pub matches: Option<PathBuf>,
    pub s_sp: Option<PathBuf>,
    pub s_p: Option<PathBuf>,
    pub s_in: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub timings: Timings,
}

pub const RECORD: &str = "record.json";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetectOptions {
    pub stage1_only: bool,
    pub no_crf: bool,
    /// Per-image external score maps replacing the backbone.
    pub scores: Option<ScoreSource>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ScoreSource {
    /// One file, only valid with a single input image.
    File(PathBuf),
    /// `<dir>/<stem>.png`.
    Dir(PathBuf),
}

impl ScoreSource {
    fn path_for(&self, image: &Path) -> PathBuf {
        match self {
            ScoreSource::File(p) => p.clone(),
            ScoreSource::Dir(d) => d.join(format!("{}.png", stem(image))),
        }
    }
}

fn stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string()
}

fn ms(t: Instant) -> Option<f64> {
    Some(t.elapsed().as_secs_f64() * 1e3)
}

pub struct Detector<'a> {
    pub config: &'a PipelineConfig,
    pub model: Option<&'a Backbone>,
    pub plugins: &'a Registry,
    pub options: DetectOptions,
}

impl Detector<'_> {
    /// Runs every image; a failing image yields its own error while the
    /// rest of the batch continues. Outputs go to `out/<image stem>/`.
    pub fn run_batch(&self, images: &[PathBuf], out: &Path) -> Vec<(PathBuf, Result<DetectionRecord>)> {
        images
            .par_iter()
            .map(|p| (p.clone(), self.run_one(p, &out.join(stem(p)))))
            .collect()
    }

    pub fn run_one(&self, image_path: &Path, dir: &Path) -> Result<DetectionRecord> {
        let image = io::read_image(image_path)?;
        let mut timings = Timings::default();
        let (scores, score_source) = match &self.options.scores {
            Some(src) => {
                let p = src.path_for(image_path);
                let s = io::read_scores(&p)?;
                if s.width() != image.width() || s.height() != image.height() {
                    return Err(Error::data(&p, "score map size differs from the image"));
                }
                (s, p.display().to_string())
            }
            None => {
                let model = self
                    .model
                    .ok_or_else(|| Error::Usage("no backbone checkpoint and random init not enabled".into()))?;
                let t = Instant::now();
                let s = model.forward_image(&image, self.config.input_side)?;
                timings.backbone = ms(t);
                (s, "backbone".to_string())
            }
        };
        let scores = io::quantize(&scores);
        io::write_image(&dir.join("image.png"), &image)?;
        io::write_scores(&dir.join("scores.png"), &scores, "scores")?;
        let mut record = DetectionRecord {
            id: stem(image_path),
            image: "image.png".into(),
            scores: "scores.png".into(),
            score_source,
            proposals: None,
            boxes: Vec::new(),
            matched: Vec::new(),
            matches: None,
            s_sp: None,
            s_p: None,
            s_in: None,
            mask: None,
            timings,
        };
        if !self.options.stage1_only {
            self.stage2(&image, &scores, dir, &mut record)?;
        }
        io::write_json(&dir.join(RECORD), &record)?;
        Ok(record)
    }

    fn stage2(&self, image: &RgbImage, scores: &ScoreMap, dir: &Path, record: &mut DetectionRecord) -> Result<()> {
        let mut cfg = self.config.stage2();
        cfg.use_crf &= !self.options.no_crf;
        cfg.validate()?;
        let plugins = self.plugins.stage2();

        let t = Instant::now();
        let proposals = self.plugins.proposals.propose(image);
        let boxes = pipeline::select(image, scores, &proposals, &cfg)?;
        record.timings.selection = ms(t);
        io::write_json(&dir.join("proposals.json"), &proposals)?;
        record.proposals = Some("proposals.json".into());
        record.boxes = boxes.clone();

        let t = Instant::now();
        let outcome = pipeline::match_boxes(image, &boxes, &plugins, &cfg)?;
        record.timings.matching = ms(t);
        io::write_json(&dir.join("matches.json"), &outcome.matches)?;
        record.matches = Some("matches.json".into());
        record.matched = outcome.matched.clone();

        let t = Instant::now();
        let (s_sp, s_p, s_in) = pipeline::fuse(image, scores, &outcome.matches, &outcome.matched, &plugins, &cfg)?;
        let s_in = io::quantize(&s_in);
        record.timings.fusion = ms(t);
        io::write_scores(&dir.join("s_sp.png"), &s_sp, "s_sp")?;
        io::write_scores(&dir.join("s_p.png"), &s_p, "s_p")?;
        io::write_scores(&dir.join("s_in.png"), &s_in, "s_in")?;
        record.s_sp = Some("s_sp.png".into());
        record.s_p = Some("s_p.png".into());
        record.s_in = Some("s_in.png".into());

        let t = Instant::now();
        let mask = pipeline::finalize(&s_in, image, &cfg)?;
        if cfg.use_crf {
            record.timings.crf = ms(t);
        }
        io::write_mask(&dir.join("mask.png"), &mask)?;
        record.mask = Some("mask.png".into());
        Ok(())
    }
}

/// Re-runs fusion and refinement from the files of a finished record and
/// returns the resulting mask.
pub fn replay(record_path: &Path, config: &PipelineConfig, plugins: &Registry, no_crf: bool) -> Result<cmfd_core::BinaryMask> {
    let record: DetectionRecord = io::read_json(record_path)?;
    let dir = record_path.parent().unwrap_or(Path::new("."));
    let image = io::read_image(&dir.join(&record.image))?;
    let scores = io::read_scores(&dir.join(&record.scores))?;
    let matches_path = record
        .matches
        .as_ref()
        .ok_or_else(|| Error::data(record_path, "record has no stage-two artifacts"))?;
    let matches: MatchSet = io::read_json(&dir.join(matches_path))?;
    let mut cfg = config.stage2();
    cfg.use_crf &= !no_crf;
    let plugins = plugins.stage2();
    let (_, _, s_in) = pipeline::fuse(&image, &scores, &matches, &record.matched, &plugins, &cfg)?;
    Ok(pipeline::finalize(&io::quantize(&s_in), &image, &cfg)?)
}
