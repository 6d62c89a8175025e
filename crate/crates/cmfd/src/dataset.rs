//! Annotated corpora, synthetic dataset generation and the JSONL manifest.
//!
//! A corpus directory holds images (`*.png`, `*.jpg`) and, for an image
//! `name.png`, one or more region masks `name.mask<k>.png`. Images without
//! masks are ignored.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cmfd_core::synth::{procedural_scene, sample_rng, synthesize_forgery, Provenance};
use cmfd_core::{BinaryMask, Error as CoreError, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::DatasetConfig;
use crate::error::{Error, Result};
use crate::io;

pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusItem {
    pub id: String,
    pub image: PathBuf,
    pub masks: Vec<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub items: Vec<CorpusItem>,
}

impl Corpus {
    pub fn open(dir: &Path) -> Result<Self> {
        let listing = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut files: Vec<PathBuf> = listing
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let mut masks: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
        let mut images = Vec::new();
        for f in files {
            let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            let lower = name.to_ascii_lowercase();
            if let Some((stem, _)) = name.split_once(".mask") {
                masks.entry(stem.to_string()).or_default().push(f);
            } else if lower.ends_with(".png") || lower.ends_with(".jpg") || lower.ends_with(".jpeg") {
                images.push(f);
            }
        }
        let items = images
            .into_iter()
            .filter_map(|image| {
                let id = image.file_stem()?.to_str()?.to_string();
                let masks = masks.remove(&id)?;
                Some(CorpusItem { id, image, masks })
            })
            .collect();
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Writes `count` procedural scenes in corpus layout.
pub fn write_procedural_corpus(dir: &Path, count: usize, size: usize, seed: u64) -> Result<Corpus> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..count).into_par_iter().try_for_each(|i| {
        let scene = procedural_scene(size, seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
        let id = format!("scene{i:05}");
        io::write_image(&dir.join(format!("{id}.png")), &scene.image)?;
        for (k, m) in scene.regions.iter().enumerate() {
            io::write_mask(&dir.join(format!("{id}.mask{k}.png")), m)?;
        }
        Ok::<_, Error>(())
    })?;
    Corpus::open(dir)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub id: String,
    pub split: Split,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub source: String,
    pub region: usize,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::data(path, format!("line {}: {e}", n + 1))))
            .collect::<Result<Vec<ManifestEntry>>>()?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, entries })
    }

    /// Writes atomically through a temporary file.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for e in &self.entries {
            text.push_str(&serde_json::to_string(e).map_err(|e| Error::Internal(e.to_string()))?);
            text.push('\n');
        }
        io::ensure_parent(path)?;
        let tmp = path.with_extension("jsonl.tmp");
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn image_path(&self, e: &ManifestEntry) -> PathBuf {
        self.root.join(&e.image)
    }

    pub fn mask_path(&self, e: &ManifestEntry) -> PathBuf {
        self.root.join(&e.mask)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Loads a split as `(image tensor, mask)` pairs at `side × side`.
    pub fn load_split(&self, split: Split, side: usize) -> Result<Vec<(Tensor, BinaryMask)>> {
        let entries: Vec<&ManifestEntry> = self.split(split).collect();
        entries
            .par_iter()
            .map(|e| {
                let image = io::read_image(&self.image_path(e))?.resize(side, side);
                let mask = io::read_mask(&self.mask_path(e))?.resize(side, side);
                Ok((image.to_tensor(), mask))
            })
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BuildReport {
    pub manifest: Manifest,
    /// Samples that could not be placed within the retry budget.
    pub skipped: Vec<usize>,
    /// Samples found complete from an earlier run.
    pub reused: usize,
}

/// Sources reserved for the test split: a seeded shuffle, first
/// `round(test_fraction · len)` items (at least one when any test sample is
/// requested and more than one source exists).
fn split_sources(len: usize, n_test: usize, cfg: &DatasetConfig, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut sample_rng(seed, u64::MAX));
    if n_test == 0 {
        return (order, Vec::new());
    }
    let k = ((cfg.test_fraction * len as f64).round() as usize).clamp(1, len.saturating_sub(1).max(1));
    let test = order.split_off(len - k);
    (order, test)
}

fn sample_id(index: usize) -> String {
    format!("{index:06}")
}

/// Generates `n` samples into `out`, reusing any complete samples listed in
/// an existing manifest there.
pub fn build_dataset(corpus: &Corpus, out: &Path, n: usize, seed: u64, cfg: &DatasetConfig) -> Result<BuildReport> {
    let manifest_path = out.join(MANIFEST);
    if n == 0 {
        let manifest = Manifest {
            root: out.to_path_buf(),
            entries: Vec::new(),
        };
        manifest.write(&manifest_path)?;
        return Ok(BuildReport {
            manifest,
            ..BuildReport::default()
        });
    }
    if corpus.is_empty() {
        return Err(Error::Usage("corpus has no annotated images".into()));
    }
    let mut previous: BTreeMap<usize, ManifestEntry> = BTreeMap::new();
    if manifest_path.exists() {
        for e in Manifest::read(&manifest_path)?.entries {
            if out.join(&e.image).exists() && out.join(&e.mask).exists() {
                previous.insert(e.index, e);
            }
        }
    }
    let n_test = (cfg.test_fraction * n as f64).round() as usize;
    let (train_src, test_src) = split_sources(corpus.len(), n_test, cfg, seed);
    let todo: Vec<usize> = (0..n).filter(|i| !previous.contains_key(i)).collect();
    let fresh: Vec<(usize, Option<ManifestEntry>)> = todo
        .par_iter()
        .map(|&i| {
            let split = if i < n_test { Split::Test } else { Split::Train };
            let pool = if split == Split::Test { &test_src } else { &train_src };
            Ok((i, make_sample(corpus, pool, out, i, split, seed, cfg)?))
        })
        .collect::<Result<_>>()?;
    let reused = previous.len();
    let mut skipped = Vec::new();
    let mut entries: BTreeMap<usize, ManifestEntry> = previous.into_iter().filter(|(i, _)| *i < n).collect();
    for (i, e) in fresh {
        match e {
            Some(e) => {
                entries.insert(i, e);
            }
            None => skipped.push(i),
        }
    }
    if !skipped.is_empty() {
        log::warn!("{} of {n} samples skipped after exhausting retries", skipped.len());
    }
    let manifest = Manifest {
        root: out.to_path_buf(),
        entries: entries.into_values().collect(),
    };
    manifest.write(&manifest_path)?;
    Ok(BuildReport {
        manifest,
        skipped,
        reused,
    })
}

fn make_sample(
    corpus: &Corpus,
    pool: &[usize],
    out: &Path,
    index: usize,
    split: Split,
    seed: u64,
    cfg: &DatasetConfig,
) -> Result<Option<ManifestEntry>> {
    if pool.is_empty() {
        return Ok(None);
    }
    let mut pick = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    pick.set_stream(index as u64);
    for attempt in 0..cfg.max_source_retries.max(1) {
        let item = &corpus.items[pool[pick.gen_range(0..pool.len())]];
        let region = pick.gen_range(0..item.masks.len());
        let image = io::read_image(&item.image)?;
        let mask = io::read_mask(&item.masks[region])?;
        if mask.is_empty() {
            continue;
        }
        let stream = ((index as u64) << 8) | attempt as u64;
        match synthesize_forgery(&image, &mask, &cfg.ranges, &cfg.synth, seed, stream) {
            Ok(sample) => {
                let id = sample_id(index);
                let entry = ManifestEntry {
                    index,
                    id: id.clone(),
                    split,
                    image: PathBuf::from("images").join(format!("{id}.png")),
                    mask: PathBuf::from("masks").join(format!("{id}.png")),
                    source: item.id.clone(),
                    region,
                    provenance: sample.provenance,
                };
                io::write_image(&out.join(&entry.image), &sample.image)?;
                io::write_mask(&out.join(&entry.mask), &sample.mask)?;
                return Ok(Some(entry));
            }
            Err(CoreError::SkipSample(_)) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(None)
}
