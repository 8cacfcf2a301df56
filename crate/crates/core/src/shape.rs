//! Moment shape descriptors and cross-domain shape similarity.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::Mask;
use crate::error::{Error, Result};

pub const DESCRIPTOR_LEN: usize = 6;
pub const DESCRIPTOR_FIELDS: [&str; DESCRIPTOR_LEN] =
    ["area_ratio", "centroid_x", "centroid_y", "eta20", "eta02", "eta11"];

/// `[area ratio, cx / W, cy / H, eta20, eta02, eta11]` of one class mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeDescriptor {
    pub values: [f64; DESCRIPTOR_LEN],
    pub empty: bool,
}

/// Raw moments use pixel centres; `eta_pq = mu_pq / M00^(1 + (p + q) / 2)`.
pub fn shape_descriptor(mask: &Mask) -> ShapeDescriptor {
    let (mut m00, mut m10, mut m01) = (0.0, 0.0, 0.0);
    for y in 0..mask.h {
        for x in 0..mask.w {
            if mask.get(y, x) {
                m00 += 1.0;
                m10 += x as f64 + 0.5;
                m01 += y as f64 + 0.5;
            }
        }
    }
    if m00 == 0.0 {
        return ShapeDescriptor {
            values: [0.0; DESCRIPTOR_LEN],
            empty: true,
        };
    }
    let (cx, cy) = (m10 / m00, m01 / m00);
    let (mut mu20, mut mu02, mut mu11) = (0.0, 0.0, 0.0);
    for y in 0..mask.h {
        for x in 0..mask.w {
            if mask.get(y, x) {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                mu20 += dx * dx;
                mu02 += dy * dy;
                mu11 += dx * dy;
            }
        }
    }
    let norm = m00 * m00;
    ShapeDescriptor {
        values: [
            m00 / (mask.h * mask.w) as f64,
            cx / mask.w as f64,
            cy / mask.h as f64,
            mu20 / norm,
            mu02 / norm,
            mu11 / norm,
        ],
        empty: false,
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Mean descriptor per class over the non-empty masks of `samples[i][class]`.
/// A class with no non-empty mask yields `None`.
pub fn mean_descriptors(samples: &[Vec<Mask>]) -> Vec<Option<[f64; DESCRIPTOR_LEN]>> {
    let k = samples.first().map_or(0, Vec::len);
    (0..k)
        .map(|c| {
            let ds: Vec<ShapeDescriptor> = samples
                .iter()
                .map(|s| shape_descriptor(&s[c]))
                .filter(|d| !d.empty)
                .collect();
            if ds.is_empty() {
                return None;
            }
            let mut mean = [0.0; DESCRIPTOR_LEN];
            for d in &ds {
                for (m, v) in mean.iter_mut().zip(d.values) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= ds.len() as f64);
            Some(mean)
        })
        .collect()
}

fn class_cosine(a: &[Option<[f64; DESCRIPTOR_LEN]>], b: &[Option<[f64; DESCRIPTOR_LEN]>]) -> Result<f64> {
    let sims: Vec<f64> = a
        .iter()
        .zip(b)
        .filter_map(|(x, y)| Some(cosine(x.as_ref()?, y.as_ref()?)))
        .collect();
    if sims.is_empty() {
        return Err(Error::AllEmpty);
    }
    Ok(sims.iter().sum::<f64>() / sims.len() as f64)
}

/// Cosine of the mean source and target descriptors, averaged over the
/// classes present on both sides.
pub fn domain_similarity(source: &[Vec<Mask>], target: &[Vec<Mask>]) -> Result<f64> {
    class_cosine(&mean_descriptors(source), &mean_descriptors(target))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("spearman", &[x.len()], &[y.len()]));
    }
    if x.len() < 3 {
        return Err(Error::TooFewDomains { need: 3, got: x.len() });
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainShape {
    pub name: String,
    pub mean_descriptor: Vec<Option<[f64; DESCRIPTOR_LEN]>>,
    pub similarity: f64,
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub source: String,
    pub source_descriptor: Vec<Option<[f64; DESCRIPTOR_LEN]>>,
    pub targets: Vec<DomainShape>,
    /// Cosine between every pair of domains, source first.
    pub pairwise: Vec<Vec<f64>>,
    pub spearman: f64,
}

/// One target domain's masks and source-only Dice.
pub struct TargetShapes<'a> {
    pub name: &'a str,
    pub masks: &'a [Vec<Mask>],
    pub dice: f64,
}

/// Rank correlation between source-target similarity and transfer Dice.
pub fn correlation_report(
    source_name: &str,
    source: &[Vec<Mask>],
    targets: &[TargetShapes],
) -> Result<SimilarityReport> {
    if targets.len() < 3 {
        return Err(Error::TooFewDomains {
            need: 3,
            got: targets.len(),
        });
    }
    let src = mean_descriptors(source);
    let means: Vec<_> = targets.iter().map(|t| mean_descriptors(t.masks)).collect();
    let mut entries = Vec::new();
    for (t, m) in targets.iter().zip(&means) {
        entries.push(DomainShape {
            name: t.name.to_string(),
            mean_descriptor: m.clone(),
            similarity: class_cosine(&src, m)?,
            dice: t.dice,
        });
    }
    let all: Vec<&Vec<_>> = std::iter::once(&src).chain(&means).collect();
    let pairwise = all
        .iter()
        .map(|a| all.iter().map(|b| class_cosine(a, b).unwrap_or(f64::NAN)).collect())
        .collect();
    let sims: Vec<f64> = entries.iter().map(|e| e.similarity).collect();
    let dices: Vec<f64> = entries.iter().map(|e| e.dice).collect();
    Ok(SimilarityReport {
        source: source_name.to_string(),
        source_descriptor: src,
        spearman: spearman(&sims, &dices)?,
        targets: entries,
        pairwise,
    })
}

impl SimilarityReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// `domain,similarity,dice` rows, the layout of a similarity-vs-Dice plot.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["domain", "similarity", "dice"])?;
        for t in &self.targets {
            w.write_record([t.name.clone(), format!("{:.6}", t.similarity), format!("{:.6}", t.dice)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-sample descriptor rows: `domain,sample,class,empty,<fields>`.
pub fn write_descriptor_csv<W: Write>(out: W, rows: &[(String, String, Vec<Mask>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["domain", "sample", "class", "empty"];
    header.extend(DESCRIPTOR_FIELDS);
    w.write_record(&header)?;
    for (domain, sample, masks) in rows {
        for (c, m) in masks.iter().enumerate() {
            let d = shape_descriptor(m);
            let mut rec = vec![domain.clone(), sample.clone(), c.to_string(), d.empty.to_string()];
            rec.extend(d.values.iter().map(|v| format!("{v:.8}")));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
