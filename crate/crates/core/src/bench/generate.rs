use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::Mask;
use super::spec::{DomainSpec, ObjectKind, Range, ShapeRegime, StyleRegime};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub domain: String,
    pub split: Split,
    pub index: usize,
    /// Intensities in `[0, 1]` quantized to 16 bits, row-major.
    pub raw: Vec<u16>,
    /// Normalized image `[1, H, W]`.
    pub image: Tensor,
    /// One mask per class.
    pub masks: Vec<Mask>,
    pub norm_mean: f64,
    pub norm_std: f64,
}

impl LabeledSample {
    pub fn id(&self) -> String {
        format!("{}-{:04}", self.split.as_str(), self.index)
    }

    pub fn size(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s[1], s[2])
    }

    /// Builds a sample from quantized intensities, normalizing them.
    pub fn from_raw(
        domain: &str,
        split: Split,
        index: usize,
        h: usize,
        w: usize,
        raw: Vec<u16>,
        masks: Vec<Mask>,
    ) -> Result<Self> {
        let values: Vec<f64> = raw.iter().map(|&q| dequantize(q)).collect();
        let (norm, mean, std) = normalize(&values);
        Ok(Self {
            domain: domain.to_string(),
            split,
            index,
            raw,
            image: Tensor::new(&[1, h, w], norm)?,
            masks,
            norm_mean: mean,
            norm_std: std,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DomainSpec,
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[LabeledSample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

const NORM_FLOOR: f64 = 1e-8;

/// Zero-mean, unit-variance copy of `values` plus the constants used.
pub fn normalize(values: &[f64]) -> (Vec<f64>, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(NORM_FLOOR);
    (values.iter().map(|v| (v - mean) / std).collect(), mean, std)
}

pub fn quantize(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

pub fn dequantize(q: u16) -> f64 {
    q as f64 / 65535.0
}

/// Deterministic per-sample seed, independent of the domain name so that
/// twins sharing a seed and shape regime share masks.
pub fn sub_seed(seed: u64, split: Split, index: usize, stream: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(split.as_str().as_bytes());
    h.update((index as u64).to_le_bytes());
    h.update(stream.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

fn draw<R: Rng>(rng: &mut R, r: Range) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.random_range(r.0..=r.1)
    }
}

/// A rotated ellipse, optionally with a harmonic outline.
#[derive(Clone, Debug)]
struct Outline {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    harmonics: Vec<(f64, f64, f64)>,
}

impl Outline {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        let r = (u * u + v * v).sqrt();
        if self.harmonics.is_empty() {
            return r <= 1.0;
        }
        let phi = v.atan2(u);
        let bound = 1.0
            + self
                .harmonics
                .iter()
                .map(|&(j, a, p)| a * (j * phi + p).cos())
                .sum::<f64>();
        r <= bound
    }

    fn raster(&self, n: usize) -> Mask {
        let mut m = Mask::empty(n, n);
        for y in 0..n {
            for x in 0..n {
                m.set(y, x, self.contains(x as f64 + 0.5, y as f64 + 0.5));
            }
        }
        m
    }
}

/// Labels plus the unlabelled distractor layer for one sample.
struct Layout {
    masks: Vec<Mask>,
    distractors: Mask,
}

fn layout(shape: &ShapeRegime, n: usize, rng: &mut ChaCha8Rng) -> Layout {
    let nf = n as f64;
    let r = draw(rng, shape.radius) * nf;
    let e = draw(rng, shape.elongation);
    let theta = draw(rng, shape.angle);
    let cx = nf / 2.0 + rng.random_range(-1.0..=1.0) * shape.jitter * nf;
    let cy = nf / 2.0 + rng.random_range(-1.0..=1.0) * shape.jitter * nf;
    let harmonics = if shape.kind == ObjectKind::Blob && shape.irregularity > 0.0 {
        // three harmonics whose amplitudes sum to the irregularity
        let w: Vec<f64> = (0..3).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = w.iter().sum();
        (0..3)
            .map(|j| {
                (
                    (j + 2) as f64,
                    shape.irregularity * w[j] / total,
                    rng.random_range(0.0..TAU),
                )
            })
            .collect()
    } else {
        Vec::new()
    };
    let outer = Outline {
        cx,
        cy,
        a: r * e.sqrt(),
        b: r / e.sqrt(),
        cos: theta.cos(),
        sin: theta.sin(),
        harmonics,
    };
    let outer_mask = outer.raster(n);
    let mut masks = vec![outer_mask];
    if shape.kind == ObjectKind::Nested {
        let rho = draw(rng, shape.inner_ratio);
        let slack = (1.0 - rho) * 0.5;
        let (du, dv) = (
            rng.random_range(-1.0..=1.0) * slack * outer.a,
            rng.random_range(-1.0..=1.0) * slack * outer.b,
        );
        let inner = Outline {
            cx: cx + du * outer.cos - dv * outer.sin,
            cy: cy + du * outer.sin + dv * outer.cos,
            a: outer.a * rho,
            b: outer.b * rho,
            ..outer.clone()
        };
        let mut m = inner.raster(n);
        for (i, o) in m.data.iter_mut().zip(&masks[0].data) {
            *i &= *o;
        }
        masks.push(m);
    }
    let count = if shape.distractors.0 == shape.distractors.1 {
        shape.distractors.0
    } else {
        rng.random_range(shape.distractors.0..=shape.distractors.1)
    };
    let mut distractors = Mask::empty(n, n);
    for _ in 0..count {
        let d = Outline {
            cx: rng.random_range(0.0..nf),
            cy: rng.random_range(0.0..nf),
            a: draw(rng, shape.distractor_radius) * nf,
            b: 0.0,
            cos: 1.0,
            sin: 0.0,
            harmonics: Vec::new(),
        };
        let d = Outline { b: d.a, ..d };
        let m = d.raster(n);
        for ((t, &v), &o) in distractors.data.iter_mut().zip(&m.data).zip(&masks[0].data) {
            *t |= v && !o;
        }
    }
    Layout { masks, distractors }
}

fn gaussian_blur(img: &mut [f64], n: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();
    let clampi = |i: isize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; img.len()];
    for y in 0..n {
        for x in 0..n {
            tmp[y * n + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * img[y * n + clampi(x as isize + k as isize - radius)])
                .sum();
        }
    }
    for y in 0..n {
        for x in 0..n {
            img[y * n + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[clampi(y as isize + k as isize - radius) * n + x])
                .sum();
        }
    }
}

/// Renders intensities in `[0, 1]` for a fixed layout.
fn render(style: &StyleRegime, lay: &Layout, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut img = vec![style.levels[0]; n * n];
    for (i, v) in img.iter_mut().enumerate() {
        if lay.distractors.data[i] {
            *v = style.levels[1] * style.distractor_level;
        }
        for (c, m) in lay.masks.iter().enumerate() {
            if m.data[i] {
                *v = style.levels[c + 1];
            }
        }
    }
    gaussian_blur(&mut img, n, style.blur);

    let nf = n as f64;
    let alpha = rng.random_range(0.0..PI);
    let phase = rng.random_range(0.0..TAU);
    let field: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.random_range(-1.0..=1.0),
                rng.random_range(-1.0..=1.0),
                rng.random_range(0.0..TAU),
            )
        })
        .collect();
    let gain = draw(rng, style.gain);
    let bias = draw(rng, style.bias);
    let gamma = draw(rng, style.gamma);
    let noise = Normal::new(0.0, style.noise.max(0.0)).expect("finite noise");
    for y in 0..n {
        for x in 0..n {
            let (u, v) = ((x as f64 + 0.5) / nf, (y as f64 + 0.5) / nf);
            let mut p = img[y * n + x];
            p += style.texture_amp * (TAU * style.texture_freq * (u * alpha.cos() + v * alpha.sin()) + phase).sin();
            let f = field
                .iter()
                .map(|&(kx, ky, ph)| (TAU * (kx * u + ky * v) + ph).cos())
                .sum::<f64>()
                / 2.0;
            p *= 1.0 + style.bias_field * f;
            p = p * gain + bias;
            p = p.clamp(0.0, 1.0).powf(gamma);
            if style.noise > 0.0 {
                p += noise.sample(rng);
            }
            img[y * n + x] = p;
        }
    }
    img
}

/// Draws one sample. Masks depend only on the seed, split, index and shape
/// regime; style is applied afterwards from an independent stream.
pub fn generate_sample(spec: &DomainSpec, split: Split, index: usize) -> Result<LabeledSample> {
    let n = spec.image_size;
    let mut shape_rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, split, index, "shape"));
    let mut style_rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, split, index, "style"));
    let lay = layout(&spec.shape, n, &mut shape_rng);
    let img = render(&spec.style, &lay, n, &mut style_rng);
    let raw = img.into_iter().map(quantize).collect();
    LabeledSample::from_raw(&spec.name, split, index, n, n, raw, lay.masks)
}

pub fn generate_domain(spec: &DomainSpec) -> Result<Dataset> {
    spec.validate()?;
    let make = |split, count| {
        (0..count)
            .map(|i| generate_sample(spec, split, i))
            .collect::<Result<Vec<_>>>()
    };
    Ok(Dataset {
        spec: spec.clone(),
        train: make(Split::Train, spec.train)?,
        test: make(Split::Test, spec.test)?,
    })
}

/// Stacks sample images into a `[B, 1, H, W]` batch.
pub fn batch_images(samples: &[&LabeledSample]) -> Result<Tensor> {
    let items: Vec<Tensor> = samples
        .iter()
        .map(|s| {
            let (h, w) = s.size();
            s.image.reshape(&[1, 1, h, w])
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = items.iter().collect();
    Tensor::stack_batch(&refs)
}

/// Flattened `[B, K, H, W]` 0/1 targets.
pub fn batch_targets(samples: &[&LabeledSample]) -> Vec<f64> {
    samples
        .iter()
        .flat_map(|s| s.masks.iter().flat_map(|m| m.data.iter().map(|&b| b as u8 as f64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::default_benchmark;

    fn small(mut spec: DomainSpec) -> DomainSpec {
        spec.train = 3;
        spec.test = 2;
        spec
    }

    #[test]
    fn deterministic() {
        let spec = small(default_benchmark(5).source);
        assert_eq!(generate_domain(&spec).unwrap(), generate_domain(&spec).unwrap());
    }

    #[test]
    fn style_twin_shares_masks() {
        let b = default_benchmark(5);
        let src = small(b.source);
        let mut twin = src.clone();
        twin.name = "twin".into();
        twin.style.noise *= 3.0;
        twin.style.texture_amp += 0.1;
        let a = generate_domain(&src).unwrap();
        let t = generate_domain(&twin).unwrap();
        for (x, y) in a.test.iter().zip(&t.test) {
            assert_eq!(x.masks, y.masks);
            assert_ne!(x.raw, y.raw);
        }
    }

    #[test]
    fn order_independent() {
        let spec = small(default_benchmark(2).source);
        let later = generate_sample(&spec, Split::Test, 1).unwrap();
        let _ = generate_sample(&spec, Split::Train, 0).unwrap();
        assert_eq!(generate_sample(&spec, Split::Test, 1).unwrap(), later);
    }

    #[test]
    fn nested_containment() {
        let mut spec = small(default_benchmark(1).source);
        spec.shape.kind = ObjectKind::Nested;
        spec.num_classes = 2;
        spec.style.levels = vec![0.2, 0.5, 0.8];
        spec.train = 20;
        let d = generate_domain(&spec).unwrap();
        for s in &d.train {
            assert_eq!(s.masks.len(), 2);
            assert!(!s.masks[1].is_empty());
            for (inner, outer) in s.masks[1].data.iter().zip(&s.masks[0].data) {
                assert!(!inner || *outer);
            }
        }
    }

    #[test]
    fn normalized_images() {
        let spec = small(default_benchmark(0).source);
        let d = generate_domain(&spec).unwrap();
        for s in d.train.iter().chain(&d.test) {
            let v = s.image.data();
            let n = v.len() as f64;
            let m = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            assert!(m.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn blur_preserves_constant() {
        let mut img = vec![0.3; 64];
        gaussian_blur(&mut img, 8, 1.5);
        assert!(img.iter().all(|v| (v - 0.3).abs() < 1e-12));
    }
}
