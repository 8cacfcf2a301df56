use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::generate::{dequantize, normalize, LabeledSample};
use super::metrics::{Mask, MetricResult};
use super::spec::Range;
use crate::error::{Error, Result};
use crate::nn::{select_trainable, AdamState, Checkpoint, Ctx, Mode, ModelConfig, Module, SegModel, TrainPolicy};
use crate::tensor::{Graph, PlaneGroups, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip: bool,
    pub rot90: bool,
    pub gain: Range,
    pub bias: Range,
    pub gamma: Range,
    pub noise: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip: true,
            rot90: true,
            gain: (0.9, 1.1),
            bias: (-0.05, 0.05),
            gamma: (0.8, 1.25),
            noise: 0.02,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            flip: false,
            rot90: false,
            gain: (1.0, 1.0),
            bias: (0.0, 0.0),
            gamma: (1.0, 1.0),
            noise: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            lr: 0.001,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
}

pub struct PretrainOutcome {
    pub model: SegModel,
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Square-grid index transform for flips and quarter turns.
fn transform_index(n: usize, y: usize, x: usize, rot: usize, flip: bool) -> usize {
    let x = if flip { n - 1 - x } else { x };
    let (y, x) = match rot % 4 {
        0 => (y, x),
        1 => (x, n - 1 - y),
        2 => (n - 1 - y, n - 1 - x),
        _ => (n - 1 - x, y),
    };
    y * n + x
}

/// Augmented copy of one sample: `(normalized image, per-class masks)`.
pub fn augment_sample<R: Rng>(s: &LabeledSample, cfg: &AugmentConfig, rng: &mut R) -> (Vec<f64>, Vec<Mask>) {
    let (n, w) = s.size();
    debug_assert_eq!(n, w);
    let rot = if cfg.rot90 { rng.random_range(0..4) } else { 0 };
    let flip = cfg.flip && rng.random_bool(0.5);
    let pick = |rng: &mut R, r: Range| if r.0 == r.1 { r.0 } else { rng.random_range(r.0..=r.1) };
    let gain = pick(rng, cfg.gain);
    let bias = pick(rng, cfg.bias);
    let gamma = pick(rng, cfg.gamma);
    let noise = Normal::new(0.0, cfg.noise).expect("finite noise");
    let mut img = vec![0.0; n * n];
    let mut masks: Vec<Mask> = s.masks.iter().map(|_| Mask::empty(n, n)).collect();
    for y in 0..n {
        for x in 0..n {
            let dst = transform_index(n, y, x, rot, flip);
            let v = dequantize(s.raw[y * n + x]);
            let mut v = (v * gain + bias).clamp(0.0, 1.0).powf(gamma);
            if cfg.noise > 0.0 {
                v += noise.sample(rng);
            }
            img[dst] = v;
            for (m, src) in masks.iter_mut().zip(&s.masks) {
                m.data[dst] = src.data[y * n + x];
            }
        }
    }
    (normalize(&img).0, masks)
}

/// Per-class mean foreground ratio.
pub fn class_priors(samples: &[LabeledSample]) -> Result<Vec<f64>> {
    let first = samples.first().ok_or(Error::EmptyDataset)?;
    let k = first.masks.len();
    let mut ratio = vec![0.0; k];
    for s in samples {
        for (r, m) in ratio.iter_mut().zip(&s.masks) {
            *r += m.count() as f64 / m.data.len() as f64;
        }
    }
    ratio.iter_mut().for_each(|r| *r /= samples.len() as f64);
    Ok(ratio)
}

const DICE_SMOOTH: f64 = 1.0;

/// Mean BCE plus one minus the batch soft Dice averaged over classes.
pub fn supervised_loss(g: &mut Graph, logits: Var, target: &[f64]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let bce = g.bce_logits(logits, target)?;
    let bce = g.mean(bce);
    let groups = Rc::new(PlaneGroups::per_channel(&shape));
    let per_class = (shape[0] * shape[2] * shape[3]) as f64;
    let t = g.constant(Tensor::new(&shape, target.to_vec())?);
    let p = g.sigmoid(logits);
    let pt = g.mul(p, t)?;
    let inter = g.group_mean(pt, &groups)?;
    let inter = g.mul_scalar(inter, 2.0 * per_class);
    let inter = g.add_scalar(inter, DICE_SMOOTH);
    let sp = g.group_mean(p, &groups)?;
    let st = g.group_mean(t, &groups)?;
    let denom = g.add(sp, st)?;
    let denom = g.mul_scalar(denom, per_class);
    let denom = g.add_scalar(denom, DICE_SMOOTH);
    let soft = g.div(inter, denom)?;
    let soft = g.mean(soft);
    let dice_loss = g.mul_scalar(soft, -1.0);
    let dice_loss = g.add_scalar(dice_loss, 1.0);
    g.add(bce, dice_loss)
}

/// Trains a fresh backbone on the source split with BCE + Dice and keeps the
/// last epoch's weights.
pub fn pretrain_source(
    model_config: ModelConfig,
    train: &[LabeledSample],
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 || cfg.lr.is_nan() || cfg.lr <= 0.0 {
        return Err(Error::InvalidConfig(
            "pretraining needs a positive batch size and learning rate".into(),
        ));
    }
    let mut model = SegModel::new(model_config, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0005_eed0_fa11);
    let selected = select_trainable(&model, TrainPolicy::ALL);
    let mut adam = AdamState::new(cfg.lr);
    let n = model.config.image_size;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut images = Vec::new();
            let mut targets = Vec::new();
            for &i in chunk {
                let (img, masks) = augment_sample(&train[i], &cfg.augment, &mut rng);
                images.extend(img);
                targets.extend(masks.iter().flat_map(|m| m.data.iter().map(|&b| b as u8 as f64)));
            }
            let x = Tensor::new(&[chunk.len(), 1, n, n], images)?;
            let mut ctx = Ctx::new(Mode::Train, TrainPolicy::ALL);
            let xv = ctx.input(&x);
            let logits = model.forward(&mut ctx, xv, None)?;
            let loss = supervised_loss(&mut ctx.graph, logits, &targets)?;
            total += ctx.graph.data(loss)[0];
            batches += 1;
            ctx.backward(loss)?;
            model.accumulate_grads(&ctx.graph);
            adam.step(&mut model, &selected)?;
            model.apply_running_updates(&ctx.running_updates);
        }
        log.push(EpochLog {
            epoch,
            loss: total / batches as f64,
        });
    }
    let mut checkpoint = Checkpoint::from_model(&model, class_priors(train)?);
    checkpoint.meta.extra.insert("epochs".into(), cfg.epochs.to_string());
    checkpoint.meta.extra.insert("seed".into(), cfg.seed.to_string());
    Ok(PretrainOutcome { model, checkpoint, log })
}

/// Eval-mode predictions for `samples` in batches.
pub fn predict_masks(
    samples: &[LabeledSample],
    batch: usize,
    mut predict: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<Vec<Vec<Mask>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&LabeledSample> = chunk.iter().collect();
        let x = super::generate::batch_images(&refs)?;
        out.extend(Mask::from_logits(&predict(&x)?)?);
    }
    Ok(out)
}

/// Source-only metrics of a backbone on `samples`.
pub fn evaluate_model(model: &SegModel, samples: &[LabeledSample]) -> Result<MetricResult> {
    let preds = predict_masks(samples, 8, |x| model.predict(x, None))?;
    let gts: Vec<Vec<Mask>> = samples.iter().map(|s| s.masks.clone()).collect();
    MetricResult::evaluate(&preds, &gts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{default_benchmark, generate_domain};

    #[test]
    fn transforms_are_permutations() {
        let n = 5;
        for rot in 0..4 {
            for flip in [false, true] {
                let mut seen = vec![false; n * n];
                for y in 0..n {
                    for x in 0..n {
                        seen[transform_index(n, y, x, rot, flip)] = true;
                    }
                }
                assert!(seen.iter().all(|&s| s));
            }
        }
        assert_eq!(transform_index(4, 0, 1, 1, false), 4 + 3);
    }

    #[test]
    fn augmentation_keeps_mask_alignment() {
        let mut spec = default_benchmark(0).source;
        spec.train = 2;
        spec.test = 0;
        let d = generate_domain(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, masks) = augment_sample(&d.train[0], &AugmentConfig::default(), &mut rng);
        assert_eq!(masks[0].count(), d.train[0].masks[0].count());
        let (img, masks) = augment_sample(&d.train[0], &AugmentConfig::none(), &mut rng);
        assert_eq!(masks, d.train[0].masks);
        for (a, b) in img.iter().zip(d.train[0].image.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn priors_count_foreground() {
        let mut spec = default_benchmark(0).source;
        spec.train = 4;
        spec.test = 0;
        let d = generate_domain(&spec).unwrap();
        let tau = class_priors(&d.train).unwrap();
        let direct: f64 = d.train.iter().map(|s| s.masks[0].count() as f64 / 4096.0).sum::<f64>() / 4.0;
        assert!((tau[0] - direct).abs() < 1e-12);
        assert!(matches!(class_priors(&[]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn supervised_loss_prefers_truth() {
        let mut g = Graph::new();
        let target = vec![1.0, 0.0, 1.0, 0.0];
        let good = g.constant(Tensor::new(&[1, 1, 2, 2], vec![8.0, -8.0, 8.0, -8.0]).unwrap());
        let bad = g.constant(Tensor::new(&[1, 1, 2, 2], vec![-8.0, 8.0, -8.0, 8.0]).unwrap());
        let lg = supervised_loss(&mut g, good, &target).unwrap();
        let lb = supervised_loss(&mut g, bad, &target).unwrap();
        assert!(g.data(lg)[0] < 0.01);
        assert!(g.data(lb)[0] > 1.0);
    }
}
