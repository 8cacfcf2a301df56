//! Slow, obviously-correct reference implementations.

use crate::bench::Mask;

pub fn brute_dice(p: &Mask, g: &Mask) -> f64 {
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for i in 0..p.data.len() {
        np += p.data[i] as usize;
        ng += g.data[i] as usize;
        inter += (p.data[i] && g.data[i]) as usize;
    }
    if np + ng == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (np + ng) as f64
    }
}

fn brute_boundary(m: &Mask) -> Vec<(i64, i64)> {
    let mut out = Vec::new();
    let (h, w) = (m.h as i64, m.w as i64);
    let inside = |y: i64, x: i64| y >= 0 && x >= 0 && y < h && x < w && m.get(y as usize, x as usize);
    for y in 0..h {
        for x in 0..w {
            if inside(y, x)
                && [(0, 1), (1, 0), (0, -1), (-1, 0)]
                    .iter()
                    .any(|(dy, dx)| !inside(y + dy, x + dx))
            {
                out.push((y, x));
            }
        }
    }
    out
}

/// All-pairs boundary distances, pooled both ways, linear 95th percentile.
pub fn brute_hd95(p: &Mask, g: &Mask) -> f64 {
    match (p.count() == 0, g.count() == 0) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return f64::INFINITY,
        _ => {}
    }
    let (bp, bg) = (brute_boundary(p), brute_boundary(g));
    let directed = |from: &[(i64, i64)], to: &[(i64, i64)]| -> Vec<f64> {
        from.iter()
            .map(|&(y, x)| {
                let best = to.iter().map(|&(v, u)| (y - v).pow(2) + (x - u).pow(2)).min().unwrap();
                (best as f64).sqrt()
            })
            .collect()
    };
    let mut d = directed(&bp, &bg);
    d.extend(directed(&bg, &bp));
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = 0.95 * (d.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    d[lo] + (d[hi] - d[lo]) * (pos - lo as f64)
}

/// An entry survives when fewer than `ceil(k n)` entries of its row beat it.
pub fn brute_topk_row(row: &[f64], k: f64) -> Vec<bool> {
    let n = ((k * row.len() as f64 - 1e-9).ceil() as usize).clamp(1, row.len());
    row.iter()
        .map(|&v| row.iter().filter(|&&u| u > v).count() < n)
        .collect()
}

/// Random mask of size at most 32x32 with blobs, lines or scattered pixels.
pub fn random_mask<R: rand::Rng>(rng: &mut R, h: usize, w: usize) -> Mask {
    let mut m = Mask::empty(h, w);
    match rng.random_range(0..4) {
        0 => {}
        1 => {
            let p = rng.random_range(0.05..0.6);
            for v in m.data.iter_mut() {
                *v = rng.random_bool(p);
            }
        }
        _ => {
            for _ in 0..rng.random_range(1..4) {
                let (cy, cx) = (rng.random_range(0..h) as f64, rng.random_range(0..w) as f64);
                let (ry, rx) = (
                    rng.random_range(0.5..=0.5 + h as f64 / 2.0),
                    rng.random_range(0.5..=0.5 + w as f64 / 2.0),
                );
                for y in 0..h {
                    for x in 0..w {
                        let e = ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2);
                        if e <= 1.0 {
                            m.set(y, x, true);
                        }
                    }
                }
            }
        }
    }
    m
}
