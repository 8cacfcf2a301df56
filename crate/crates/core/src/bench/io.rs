//! One directory per domain: `manifest.json`, then `<split>/<id>.png`
//! (16-bit intensities) and `<split>/<id>_c<k>.png` (8-bit masks, 0 or 255).

use std::fs;
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::generate::{Dataset, LabeledSample, Split};
use super::metrics::Mask;
use super::spec::DomainSpec;
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub split: Split,
    pub index: usize,
    pub norm_mean: f64,
    pub norm_std: f64,
    /// SHA-256 of the quantized intensities and masks.
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainManifest {
    pub spec: DomainSpec,
    pub samples: Vec<SampleEntry>,
}

pub fn sample_digest(s: &LabeledSample) -> String {
    let mut h = Sha256::new();
    for v in &s.raw {
        h.update(v.to_le_bytes());
    }
    for m in &s.masks {
        h.update(m.data.iter().map(|&b| b as u8).collect::<Vec<_>>());
    }
    hex::encode(h.finalize())
}

fn write_sample(dir: &Path, s: &LabeledSample) -> Result<()> {
    let (h, w) = s.size();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(w as u32, h as u32, s.raw.clone())
        .ok_or_else(|| Error::shape("png", &[h, w], &[s.raw.len()]))?;
    img.save(dir.join(format!("{}.png", s.id())))?;
    for (k, m) in s.masks.iter().enumerate() {
        save_mask(&dir.join(format!("{}_c{k}.png", s.id())), m)?;
    }
    Ok(())
}

/// Writes a mask as an 8-bit PNG, 255 for foreground.
pub fn save_mask(path: &Path, m: &Mask) -> Result<()> {
    let bytes = m.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    let png = GrayImage::from_raw(m.w as u32, m.h as u32, bytes)
        .ok_or_else(|| Error::shape("png", &[m.h, m.w], &[m.data.len()]))?;
    png.save(path)?;
    Ok(())
}

/// Reads a mask PNG, thresholding at half intensity.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let m = image::open(path)?.into_luma8();
    Mask::new(
        m.height() as usize,
        m.width() as usize,
        m.as_raw().iter().map(|&v| v > 127).collect(),
    )
}

pub fn save_domain(root: &Path, data: &Dataset) -> Result<()> {
    let dir = root.join(&data.spec.name);
    let mut samples = Vec::new();
    for split in [Split::Train, Split::Test] {
        let sub = dir.join(split.as_str());
        fs::create_dir_all(&sub)?;
        for s in data.split(split) {
            write_sample(&sub, s)?;
            samples.push(SampleEntry {
                id: s.id(),
                split,
                index: s.index,
                norm_mean: s.norm_mean,
                norm_std: s.norm_std,
                digest: sample_digest(s),
            });
        }
    }
    let manifest = DomainManifest {
        spec: data.spec.clone(),
        samples,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

pub fn read_manifest(dir: &Path) -> Result<DomainManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| format_err(&path, e.to_string()))
}

/// Loads a domain directory, checking every sample against its digest.
pub fn load_domain(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let spec = manifest.spec;
    let n = spec.image_size;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for e in &manifest.samples {
        let sub = dir.join(e.split.as_str());
        let path = sub.join(format!("{}.png", e.id));
        let img = image::open(&path)?;
        let img = img
            .as_luma16()
            .ok_or_else(|| format_err(&path, "expected 16-bit grayscale"))?;
        if img.width() as usize != n || img.height() as usize != n {
            return Err(format_err(&path, format!("expected {n}x{n}")));
        }
        let raw = img.as_raw().clone();
        let mut masks = Vec::new();
        for k in 0..spec.num_classes {
            let mpath = sub.join(format!("{}_c{k}.png", e.id));
            let m = load_mask(&mpath)?;
            if m.w != n || m.h != n {
                return Err(format_err(&mpath, format!("expected {n}x{n}")));
            }
            masks.push(m);
        }
        let s = LabeledSample::from_raw(&spec.name, e.split, e.index, n, n, raw, masks)?;
        if sample_digest(&s) != e.digest {
            return Err(format_err(&path, "content does not match manifest digest"));
        }
        match e.split {
            Split::Train => train.push(s),
            Split::Test => test.push(s),
        }
    }
    Ok(Dataset { spec, train, test })
}

/// SHA-256 of a manifest file's bytes.
pub fn manifest_digest(dir: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(dir.join(MANIFEST))?)))
}
