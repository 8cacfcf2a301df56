use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{kaiming_gain, Conv2d, ConvBlock};
use super::norm::{NormKind, NormLayer};
use super::param::{Ctx, Module, Param, ParamGroup, RunningUpdate};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Injection points for prompts inside [`SegModel::forward`].
pub trait ForwardHooks {
    /// Replaces the network input before the encoder.
    fn decorate(&self, ctx: &mut Ctx, x: Var) -> Result<Var>;
    /// Replaces the bottleneck feature before the decoder.
    fn modulate(&self, ctx: &mut Ctx, z: Var) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub image_size: usize,
    /// Encoder widths, one stride-2 stage after the first.
    pub widths: [usize; 3],
    pub bottleneck: usize,
    pub norm: NormKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 2,
            image_size: 64,
            widths: [16, 32, 64],
            bottleneck: 64,
            norm: NormKind::Batch,
        }
    }
}

impl ModelConfig {
    /// Spatial extent of the bottleneck feature map.
    pub fn bottleneck_extent(&self) -> usize {
        self.image_size / 8
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(8) {
            return Err(Error::InvalidConfig(format!(
                "image size {} must be a positive multiple of 8",
                self.image_size
            )));
        }
        if self.in_channels == 0 || self.num_classes == 0 {
            return Err(Error::InvalidConfig("empty channel count".into()));
        }
        Ok(())
    }
}

/// Small U-Net: three encoder stages, a stride-2 bottleneck, and a mirrored
/// decoder with nearest-neighbour upsampling and skip concatenation.
#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    pub config: ModelConfig,
    enc: [ConvBlock; 3],
    bottleneck: ConvBlock,
    dec: [ConvBlock; 3],
    head: Conv2d,
}

impl SegModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [w0, w1, w2] = config.widths;
        let nk = config.norm;
        let b = config.bottleneck;
        let enc = [
            ConvBlock::new("enc0", config.in_channels, w0, 1, nk, &mut rng)?,
            ConvBlock::new("enc1", w0, w1, 2, nk, &mut rng)?,
            ConvBlock::new("enc2", w1, w2, 2, nk, &mut rng)?,
        ];
        let bottleneck = ConvBlock::new("bottleneck", w2, b, 2, nk, &mut rng)?;
        let dec = [
            ConvBlock::new("dec2", b + w2, w1, 1, nk, &mut rng)?,
            ConvBlock::new("dec1", w1 + w1, w0, 1, nk, &mut rng)?,
            ConvBlock::new("dec0", w0 + w0, w0, 1, nk, &mut rng)?,
        ];
        let head = Conv2d::new(
            "head",
            ParamGroup::Backbone,
            w0,
            config.num_classes,
            1,
            1,
            1,
            kaiming_gain(),
            &mut rng,
        );
        Ok(Self {
            config,
            enc,
            bottleneck,
            dec,
            head,
        })
    }

    /// Logits `[B, num_classes, H, W]` for input `[B, in_channels, H, W]`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, hooks: Option<&dyn ForwardHooks>) -> Result<Var> {
        let s = ctx.graph.shape(x).to_vec();
        let n = self.config.image_size;
        if s.len() != 4 || s[1] != self.config.in_channels || s[2] != n || s[3] != n {
            return Err(Error::shape("model input", &s, &[0, self.config.in_channels, n, n]));
        }
        let x = match hooks {
            Some(h) => h.decorate(ctx, x)?,
            None => x,
        };
        let s0 = self.enc[0].forward(ctx, x)?;
        let s1 = self.enc[1].forward(ctx, s0)?;
        let s2 = self.enc[2].forward(ctx, s1)?;
        let z = self.bottleneck.forward(ctx, s2)?;
        let z = match hooks {
            Some(h) => h.modulate(ctx, z)?,
            None => z,
        };
        let mut y = z;
        for (block, skip) in self.dec.iter().zip([s2, s1, s0]) {
            let up = ctx.graph.upsample2x(y)?;
            let cat = ctx.graph.concat(&[up, skip], 1)?;
            y = block.forward(ctx, cat)?;
        }
        self.head.forward(ctx, y)
    }

    /// Convenience eval-mode forward returning the logits tensor.
    pub fn predict(&self, x: &Tensor, hooks: Option<&dyn ForwardHooks>) -> Result<Tensor> {
        let mut ctx = Ctx::eval();
        let v = ctx.input(x);
        let y = self.forward(&mut ctx, v, hooks)?;
        Ok(ctx.graph.value(y).clone())
    }

    pub fn norms(&self) -> impl Iterator<Item = &NormLayer> {
        self.enc
            .iter()
            .chain(std::iter::once(&self.bottleneck))
            .chain(&self.dec)
            .map(|b| &b.norm)
    }

    pub fn norms_mut(&mut self) -> impl Iterator<Item = &mut NormLayer> {
        self.enc
            .iter_mut()
            .chain(std::iter::once(&mut self.bottleneck))
            .chain(&mut self.dec)
            .map(|b| &mut b.norm)
    }

    pub fn apply_running_updates(&mut self, updates: &[RunningUpdate]) {
        for upd in updates {
            if let Some(layer) = self.norms_mut().find(|n| n.name == upd.layer) {
                layer.apply_running_update(upd);
            }
        }
    }

    /// `(layer, running mean, running var)` of every tracked BN layer.
    pub fn running_stats(&self) -> Vec<(String, Vec<f64>, Vec<f64>)> {
        self.norms()
            .filter(|n| n.tracks_running_stats())
            .map(|n| (n.name.clone(), n.running_mean.clone(), n.running_var.clone()))
            .collect()
    }
}

impl Module for SegModel {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        for b in self
            .enc
            .iter()
            .chain(std::iter::once(&self.bottleneck))
            .chain(&self.dec)
        {
            b.visit(f);
        }
        for p in self.head.params() {
            f(p);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for b in self
            .enc
            .iter_mut()
            .chain(std::iter::once(&mut self.bottleneck))
            .chain(&mut self.dec)
        {
            b.visit_mut(f);
        }
        for p in self.head.params_mut() {
            f(p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param::{select_trainable, TrainPolicy};
    use std::collections::HashSet;

    #[test]
    fn output_shape_and_finite_logits() {
        let m = SegModel::new(ModelConfig::default(), 0).unwrap();
        let x = Tensor::zeros(&[2, 1, 64, 64]);
        let y = m.predict(&x, None).unwrap();
        assert_eq!(y.shape(), &[2, 2, 64, 64]);
        assert!(y.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_wrong_input() {
        let m = SegModel::new(ModelConfig::default(), 0).unwrap();
        assert!(m.predict(&Tensor::zeros(&[1, 2, 64, 64]), None).is_err());
        assert!(m.predict(&Tensor::zeros(&[1, 1, 32, 32]), None).is_err());
    }

    #[test]
    fn registry_names_are_unique() {
        let m = SegModel::new(ModelConfig::default(), 0).unwrap();
        let names: Vec<_> = m.params().iter().map(|p| p.name.clone()).collect();
        let set: HashSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        let affine = select_trainable(&m, TrainPolicy::NORM_ONLY);
        assert_eq!(affine.len(), 2 * 7);
        assert!(affine.iter().all(|n| n.ends_with(".gamma") || n.ends_with(".beta")));
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = SegModel::new(ModelConfig::default(), 7).unwrap();
        let b = SegModel::new(ModelConfig::default(), 7).unwrap();
        let c = SegModel::new(ModelConfig::default(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
