//! Name registry for the pluggable stage-two components.

use cmfd_core::keypoint::{HarrisExtractor, KeypointExtractor, Matcher, MutualNnMatcher};
use cmfd_core::pipeline::Stage2Plugins;
use cmfd_core::proposal::{EdgeBoxGenerator, ProposalGenerator};
use cmfd_core::superpixel::{Segmenter, Slic};

use crate::config::PluginNames;
use crate::error::{Error, Result};

pub const PROPOSALS: &[&str] = &["edgebox"];
pub const EXTRACTORS: &[&str] = &["classical"];
pub const MATCHERS: &[&str] = &["classical"];
pub const SEGMENTERS: &[&str] = &["slic"];

fn check(kind: &str, name: &str, known: &[&str]) -> Result<()> {
    if known.contains(&name) {
        Ok(())
    } else {
        Err(Error::Usage(format!(
            "unknown {kind} plug-in `{name}` (registered: {})",
            known.join(", ")
        )))
    }
}

pub fn check_names(names: &PluginNames) -> Result<()> {
    check("proposal", &names.proposals, PROPOSALS)?;
    check("extractor", &names.extractor, EXTRACTORS)?;
    check("matcher", &names.matcher, MATCHERS)?;
    check("segmenter", &names.segmenter, SEGMENTERS)
}

/// Concrete plug-ins resolved from a checked [`PluginNames`].
pub struct Registry {
    pub proposals: Box<dyn ProposalGenerator + Send + Sync>,
    pub extractor: Box<dyn KeypointExtractor + Send + Sync>,
    pub matcher: Box<dyn Matcher + Send + Sync>,
    pub segmenter: Box<dyn Segmenter + Send + Sync>,
}

impl Registry {
    pub fn new(names: &PluginNames) -> Result<Self> {
        check_names(names)?;
        Ok(Self {
            proposals: Box::new(EdgeBoxGenerator::default()),
            extractor: Box::new(HarrisExtractor::default()),
            matcher: Box::new(MutualNnMatcher::default()),
            segmenter: Box::new(Slic::default()),
        })
    }

    pub fn stage2(&self) -> Stage2Plugins<'_> {
        Stage2Plugins {
            extractor: self.extractor.as_ref(),
            matcher: self.matcher.as_ref(),
            segmenter: self.segmenter.as_ref(),
        }
    }
}
