use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A single-class binary mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![false; h * w],
        }
    }

    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape("mask", &[h, w], &[data.len()]));
        }
        Ok(Self { h, w, data })
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Foreground pixels with a 4-neighbour outside the mask or the image.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.h {
            for x in 0..self.w {
                if !self.get(y, x) {
                    continue;
                }
                let edge = y == 0
                    || x == 0
                    || y + 1 == self.h
                    || x + 1 == self.w
                    || !self.get(y - 1, x)
                    || !self.get(y + 1, x)
                    || !self.get(y, x - 1)
                    || !self.get(y, x + 1);
                if edge {
                    out.push((y, x));
                }
            }
        }
        out
    }

    /// Splits a `[B, K, H, W]` logit tensor into per-sample, per-class masks
    /// of `logit > 0`.
    pub fn from_logits(logits: &Tensor) -> Result<Vec<Vec<Mask>>> {
        let s = logits.shape();
        if s.len() != 4 {
            return Err(Error::shape("mask from logits", s, &[0, 0, 0, 0]));
        }
        let (b, k, h, w) = (s[0], s[1], s[2], s[3]);
        let d = logits.data();
        Ok((0..b)
            .map(|i| {
                (0..k)
                    .map(|c| Mask {
                        h,
                        w,
                        data: d[(i * k + c) * h * w..][..h * w].iter().map(|&v| v > 0.0).collect(),
                    })
                    .collect()
            })
            .collect())
    }
}

fn check_same(op: &'static str, a: &Mask, b: &Mask) -> Result<()> {
    if a.h != b.h || a.w != b.w || a.data.len() != b.data.len() {
        return Err(Error::shape(op, &[a.h, a.w], &[b.h, b.w]));
    }
    Ok(())
}

/// `2|P n G| / (|P| + |G|)`, with 1 when both masks are empty.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_same("dice", pred, gt)?;
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        inter += (p && g) as usize;
        np += p as usize;
        ng += g as usize;
    }
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + ng) as f64)
}

/// One-dimensional squared distance transform of a sampled function
/// (lower envelope of parabolas). Infinite samples are not sites.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let mut k: Option<usize> = None;
    for q in 0..f.len() {
        if f[q].is_infinite() {
            continue;
        }
        let Some(mut kk) = k else {
            k = Some(0);
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            continue;
        };
        let s = loop {
            let p = v[kk];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2 * (q - p)) as f64;
            if s <= z[kk] {
                kk -= 1;
            } else {
                break s;
            }
        };
        kk += 1;
        v[kk] = q;
        z[kk] = s;
        z[kk + 1] = f64::INFINITY;
        k = Some(kk);
    }
    if k.is_none() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest `true`
/// site; infinite everywhere when there is none.
pub fn squared_edt(sites: &Mask) -> Vec<f64> {
    let (h, w) = (sites.h, sites.w);
    let n = h.max(w);
    let mut grid: Vec<f64> = sites
        .data
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..][..w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[y * w..][..w].copy_from_slice(&out[..w]);
    }
    grid
}

/// Linear-interpolated percentile (`q` in `[0, 100]`) of unsorted values.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    values[lo] + (values[hi] - values[lo]) * frac
}

/// 95th percentile of the pooled directed boundary-to-boundary distances.
/// Empty vs empty is 0 and empty vs non-empty is infinite.
pub fn hd95(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_same("hd95", pred, gt)?;
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(f64::INFINITY),
        _ => {}
    }
    let bp = pred.boundary();
    let bg = gt.boundary();
    let sites = |pts: &[(usize, usize)]| {
        let mut m = Mask::empty(pred.h, pred.w);
        for &(y, x) in pts {
            m.set(y, x, true);
        }
        squared_edt(&m)
    };
    let to_gt = sites(&bg);
    let to_pred = sites(&bp);
    let mut d: Vec<f64> = bp
        .iter()
        .map(|&(y, x)| to_gt[y * pred.w + x].sqrt())
        .chain(bg.iter().map(|&(y, x)| to_pred[y * pred.w + x].sqrt()))
        .collect();
    Ok(percentile(&mut d, 95.0))
}

/// Per-class metric values over a set of samples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    /// `dice[class][sample]`
    pub dice: Vec<Vec<f64>>,
    pub hd95: Vec<Vec<f64>>,
}

impl MetricResult {
    /// `preds[sample][class]` against `gts[sample][class]`.
    pub fn evaluate(preds: &[Vec<Mask>], gts: &[Vec<Mask>]) -> Result<Self> {
        if preds.len() != gts.len() {
            return Err(Error::shape("evaluate", &[preds.len()], &[gts.len()]));
        }
        let k = gts.first().map_or(0, Vec::len);
        let mut r = Self {
            dice: vec![Vec::new(); k],
            hd95: vec![Vec::new(); k],
        };
        for (p, g) in preds.iter().zip(gts) {
            if p.len() != k || g.len() != k {
                return Err(Error::shape("evaluate", &[p.len()], &[k]));
            }
            for c in 0..k {
                r.dice[c].push(dice(&p[c], &g[c])?);
                r.hd95[c].push(hd95(&p[c], &g[c])?);
            }
        }
        Ok(r)
    }

    pub fn num_samples(&self) -> usize {
        self.dice.first().map_or(0, Vec::len)
    }

    /// Dice of sample `i` averaged over classes.
    pub fn sample_dice(&self, i: usize) -> f64 {
        self.dice.iter().map(|d| d[i]).sum::<f64>() / self.dice.len() as f64
    }

    /// Mean Dice over classes and samples.
    pub fn mean_dice(&self) -> f64 {
        let n = self.num_samples();
        if n == 0 {
            return f64::NAN;
        }
        (0..n).map(|i| self.sample_dice(i)).sum::<f64>() / n as f64
    }

    pub fn dice_summary(&self, class: usize) -> (f64, f64) {
        mean_std(&self.dice[class])
    }

    /// Mean and std over the finite HD95 values, plus the count of infinite ones.
    pub fn hd95_summary(&self, class: usize) -> (f64, f64, usize) {
        let finite: Vec<f64> = self.hd95[class].iter().copied().filter(|v| v.is_finite()).collect();
        let (m, s) = mean_std(&finite);
        (m, s, self.hd95[class].len() - finite.len())
    }
}

/// Population mean and standard deviation; NaN for an empty slice.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}
