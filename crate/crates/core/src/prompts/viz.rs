//! Grayscale PNG export of decorator outputs and bank templates.

use std::fs;
use std::path::{Path, PathBuf};

use image::GrayImage;

use super::{Capm, InputDecorator};
use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::tensor::Tensor;

/// Min-max scales `data` to 0..=255; a constant map becomes all zeros.
pub fn to_gray8(data: &[f64]) -> Vec<u8> {
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    data.iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect()
}

pub fn write_gray_png(path: &Path, data: &[f64], h: usize, w: usize) -> Result<()> {
    let img = GrayImage::from_raw(w as u32, h as u32, to_gray8(data))
        .ok_or_else(|| Error::shape("png export", &[h, w], &[data.len()]))?;
    img.save(path)?;
    Ok(())
}

/// Writes `ID(x)` for every sample (first channel) as `id_<n>.png`.
pub fn export_decorator_maps(dec: &InputDecorator, x: &Tensor, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut ctx = Ctx::eval();
    let v = ctx.input(x);
    let p = dec.prompt(&mut ctx, v)?;
    let out = ctx.graph.value(p);
    let s = out.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let mut paths = Vec::new();
    for b in 0..s[0] {
        let plane = &out.data()[b * c * h * w..][..h * w];
        let path = dir.join(format!("id_{b:04}.png"));
        write_gray_png(&path, plane, h, w)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Writes the requested bank templates as `sp_<index>.png`.
pub fn export_bank_templates(capm: &Capm, indices: &[usize], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let (h, w) = capm.bank.extent();
    let l = capm.bank.size();
    let mut paths = Vec::new();
    for &i in indices {
        if i >= l {
            return Err(Error::InvalidConfig(format!("template {i} out of range 0..{l}")));
        }
        let path = dir.join(format!("sp_{i:04}.png"));
        write_gray_png(&path, capm.bank.template(i), h, w)?;
        paths.push(path);
    }
    Ok(paths)
}
