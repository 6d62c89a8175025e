//! The TOML pipeline configuration and `--set key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use cmfd_core::backbone::{BackboneConfig, TrainConfig};
use cmfd_core::crf::CrfParams;
use cmfd_core::fusion::FusionParams;
use cmfd_core::keypoint::MatchParams;
use cmfd_core::pipeline::Stage2Config;
use cmfd_core::proposal::SelectionParams;
use cmfd_core::synth::{SynthConfig, TransformRanges};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plugins;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub backbone: BackboneConfig,
    /// Square side the backbone sees; scores are resized back.
    pub input_side: usize,
    pub selection: SelectionParams,
    pub matching: MatchParams,
    pub fusion: FusionParams,
    pub crf: CrfParams,
    pub stage2: Stage2Options,
    pub plugins: PluginNames,
    pub dataset: DatasetConfig,
    pub train: TrainOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            backbone: BackboneConfig::default(),
            input_side: 512,
            selection: SelectionParams::default(),
            matching: MatchParams::default(),
            fusion: FusionParams::default(),
            crf: CrfParams::default(),
            stage2: Stage2Options::default(),
            plugins: PluginNames::default(),
            dataset: DatasetConfig::default(),
            train: TrainOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Options {
    pub superpixels: Option<usize>,
    pub use_crf: bool,
}

impl Default for Stage2Options {
    fn default() -> Self {
        Self {
            superpixels: None,
            use_crf: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PluginNames {
    pub proposals: String,
    pub extractor: String,
    pub matcher: String,
    pub segmenter: String,
}

impl Default for PluginNames {
    fn default() -> Self {
        Self {
            proposals: "edgebox".into(),
            extractor: "classical".into(),
            matcher: "classical".into(),
            segmenter: "slic".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Directory of annotated images; see the `generate` command.
    pub corpus: Option<PathBuf>,
    pub out: PathBuf,
    pub n: usize,
    /// Fraction of samples in the test split, drawn from disjoint sources.
    pub test_fraction: f64,
    /// Source images re-drawn when a sample cannot be placed.
    pub max_source_retries: usize,
    pub ranges: TransformRanges,
    pub synth: SynthConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            out: PathBuf::from("data"),
            n: 100,
            test_fraction: 0.0,
            max_source_retries: 8,
            ranges: TransformRanges::default(),
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    #[serde(flatten)]
    pub optimizer: TrainConfig,
    /// Side training images are resized to.
    pub side: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            optimizer: TrainConfig::default(),
            side: 512,
        }
    }
}

impl PipelineConfig {
    /// Reads `path` (if any), applies `section.key=value` overrides and
    /// validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>().map_err(|e| Error::data(p, e))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: PipelineConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Usage(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |e: cmfd_core::Error| Error::Usage(format!("invalid configuration: {e}"));
        self.stage2().validate().map_err(usage)?;
        self.dataset.ranges.validate().map_err(usage)?;
        self.backbone.validate().map_err(usage)?;
        if self.input_side == 0 || self.input_side % self.backbone.stride() != 0 {
            return Err(Error::Usage(format!(
                "input_side must be a positive multiple of {}",
                self.backbone.stride()
            )));
        }
        if !(0.0..=1.0).contains(&self.dataset.test_fraction) {
            return Err(Error::Usage("dataset.test_fraction must lie in [0, 1]".into()));
        }
        plugins::check_names(&self.plugins)
    }

    pub fn stage2(&self) -> Stage2Config {
        Stage2Config {
            selection: self.selection.clone(),
            matching: self.matching.clone(),
            fusion: self.fusion.clone(),
            crf: self.crf.clone(),
            superpixels: self.stage2.superpixels,
            use_crf: self.stage2.use_crf,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }
}

/// `a.b.c=value`; the value is parsed as TOML and falls back to a string.
fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override `{spec}` is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut table = doc;
    for p in path {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Usage(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml();
        let back: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let set = vec![
            "selection.s_t=0.3".to_string(),
            "backbone.extractor=\"tiny\"".to_string(),
            "plugins.matcher=classical".to_string(),
            "dataset.ranges.scale=[1.0, 2.0]".to_string(),
        ];
        let cfg = PipelineConfig::load(None, &set).unwrap();
        assert_eq!(cfg.selection.s_t, 0.3);
        assert_eq!(cfg.backbone.extractor, cmfd_core::backbone::ExtractorKind::Tiny);
        assert_eq!(cfg.dataset.ranges.scale.hi(), 2.0);
    }

    #[test]
    fn bad_values_are_usage_errors() {
        for bad in ["fusion.phi=0", "crf.window=4", "plugins.matcher=\"superglue\"", "nope=1"] {
            let e = PipelineConfig::load(None, &[bad.to_string()]).unwrap_err();
            assert_eq!(e.exit_code(), 1, "{bad}: {e}");
        }
    }
}
