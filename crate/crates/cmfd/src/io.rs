//! File formats: RGB images, `{0, 255}` mask PNGs, 16-bit score-map PNGs
//! with a JSON sidecar, and JSON helpers.

use std::fs;
use std::path::{Path, PathBuf};

use cmfd_core::{BinaryMask, RgbImage, ScoreMap};
use image::{DynamicImage, GrayImage, ImageBuffer, Luma};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Full scale of a stored score.
pub const SCORE_SCALE: f64 = 65535.0;

/// Metadata written next to every score-map PNG.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSidecar {
    pub width: usize,
    pub height: usize,
    pub bit_depth: u8,
    /// Stored value = round(score · scale).
    pub scale: f64,
    pub kind: String,
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::data(path, e))
}

pub fn read_image(path: &Path) -> Result<RgbImage> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(RgbImage::from_raw(w, h, img.into_raw())?)
}

pub fn write_image(path: &Path, image: &RgbImage) -> Result<()> {
    let buf = image::RgbImage::from_raw(image.width() as u32, image.height() as u32, image.as_raw().to_vec())
        .ok_or_else(|| Error::Internal("image buffer size".into()))?;
    ensure_parent(path)?;
    buf.save(path).map_err(|e| Error::data(path, e))
}

/// Any non-zero gray value is foreground.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(BinaryMask::from_vec(w, h, img.into_raw())?)
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let data = mask.as_slice().iter().map(|&v| v * 255).collect();
    let buf = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, data)
        .ok_or_else(|| Error::Internal("mask buffer size".into()))?;
    ensure_parent(path)?;
    buf.save(path).map_err(|e| Error::data(path, e))
}

/// Rounds scores to the 16-bit grid used on disk.
pub fn quantize(s: &ScoreMap) -> ScoreMap {
    let data = s
        .as_slice()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * SCORE_SCALE).round() / SCORE_SCALE)
        .collect();
    ScoreMap::from_vec(s.width(), s.height(), data).expect("same shape")
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes a 16-bit PNG plus `<stem>.json` describing it.
pub fn write_scores(path: &Path, s: &ScoreMap, kind: &str) -> Result<()> {
    let data: Vec<u16> = s
        .as_slice()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * SCORE_SCALE).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(s.width() as u32, s.height() as u32, data)
        .ok_or_else(|| Error::Internal("score buffer size".into()))?;
    ensure_parent(path)?;
    buf.save(path).map_err(|e| Error::data(path, e))?;
    let meta = ScoreSidecar {
        width: s.width(),
        height: s.height(),
        bit_depth: 16,
        scale: SCORE_SCALE,
        kind: kind.to_string(),
    };
    write_json(&sidecar_path(path), &meta)
}

/// Reads a score map. 16-bit PNGs map to `[0, 1]` by 65535, 8-bit ones
/// (e.g. ground-truth masks) by 255.
pub fn read_scores(path: &Path) -> Result<ScoreMap> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma8(g) => g.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        other => other
            .to_luma16()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / SCORE_SCALE)
            .collect(),
    };
    Ok(ScoreMap::from_vec(w, h, data)?)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Internal(e.to_string()))?;
    ensure_parent(path)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::data(path, e))
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_round_trip_is_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.png");
        let s = ScoreMap::from_vec(3, 2, vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.123_456_7]).unwrap();
        write_scores(&p, &s, "scores").unwrap();
        let back = read_scores(&p).unwrap();
        assert_eq!(back, quantize(&s));
        let meta: ScoreSidecar = read_json(&sidecar_path(&p)).unwrap();
        assert_eq!((meta.width, meta.height, meta.bit_depth), (3, 2, 16));
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let m = BinaryMask::from_fn(5, 4, |x, y| (x + y) % 3 == 0);
        write_mask(&p, &m).unwrap();
        assert_eq!(read_mask(&p).unwrap(), m);
        let raw = image::open(&p).unwrap().to_luma8().into_raw();
        assert!(raw.iter().all(|&v| v == 0 || v == 255));
        let as_scores = read_scores(&p).unwrap();
        assert_eq!(as_scores, ScoreMap::from_mask(&m));
    }

    #[test]
    fn missing_file_is_a_data_error() {
        let e = read_image(Path::new("/nonexistent/x.png")).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }
}
