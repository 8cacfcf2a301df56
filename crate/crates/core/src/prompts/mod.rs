//! Input-space and latent shape prompts.
//!
//! The [`InputDecorator`] adds a sample-conditioned residual to the image.
//! The [`Capm`] lets each bottleneck channel attend over a bank of `L`
//! learnable templates, keeps the top-k scores per channel, and adds the
//! resulting prompt back onto the feature. Both start as exact identities.

mod capm;
mod decorator;
mod topk;
pub mod viz;

pub use capm::{Capm, CapmParams, CapmTrace, ShapePromptBank};
pub use decorator::InputDecorator;
pub use topk::{keep_count, sparsify_topk, topk_mask};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{kaiming_gain, Ctx, ForwardHooks, Module, NormKind, Param, RunningUpdate, SegModel};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub in_channels: usize,
    /// Hidden width of the decorator.
    pub hidden: usize,
    pub id_norm: NormKind,
    /// Number of bank templates `L`.
    pub bank_size: usize,
    /// Bottleneck channels `C`.
    pub channels: usize,
    /// Bottleneck spatial extent.
    pub extent: (usize, usize),
    pub top_k: f64,
    /// Scale of the fan-in init of the prompt convolutions.
    pub gain: f64,
    /// Standard deviation of the bank templates.
    pub bank_std: f64,
    pub use_id: bool,
    pub use_capm: bool,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            hidden: 16,
            id_norm: NormKind::Instance,
            bank_size: 64,
            channels: 64,
            extent: (8, 8),
            top_k: 0.1,
            gain: kaiming_gain(),
            bank_std: kaiming_gain() / std::f64::consts::SQRT_2,
            use_id: true,
            use_capm: true,
        }
    }
}

impl PromptConfig {
    pub fn for_model(model: &SegModel) -> Self {
        let e = model.config.bottleneck_extent();
        Self {
            in_channels: model.config.in_channels,
            channels: model.config.bottleneck,
            extent: (e, e),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.in_channels == 0 || self.hidden == 0 || self.channels == 0 {
            return bad("prompt channel counts must be positive");
        }
        if self.bank_size == 0 {
            return bad("bank size must be at least 1");
        }
        if self.extent.0 == 0 || self.extent.1 == 0 {
            return bad("bank extent must be positive");
        }
        if !(self.gain >= 0.0 && self.gain.is_finite()) {
            return bad("init gain must be finite and non-negative");
        }
        if !(self.bank_std >= 0.0 && self.bank_std.is_finite()) {
            return bad("bank std must be finite and non-negative");
        }
        keep_count(self.top_k, self.bank_size)?;
        Ok(())
    }
}

/// The optional prompt modules active inside a forward pass.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PromptState {
    pub decorator: Option<InputDecorator>,
    pub capm: Option<Capm>,
}

/// Seeded prompt initialization. The decorator's last conv and the value
/// projection start at zero.
pub fn init_prompts(seed: u64, config: &PromptConfig) -> Result<PromptState> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let decorator = InputDecorator::new(config.in_channels, config.hidden, config.id_norm, config.gain, &mut rng)?;
    let (h, w) = config.extent;
    let bank = ShapePromptBank::new(config.bank_size, h, w, config.bank_std, &mut rng);
    let params = CapmParams::new(config.channels, config.bank_size, config.top_k, config.gain, &mut rng);
    Ok(PromptState {
        decorator: config.use_id.then_some(decorator),
        capm: config.use_capm.then_some(Capm { bank, params }),
    })
}

impl ForwardHooks for PromptState {
    fn decorate(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        match &self.decorator {
            Some(d) => d.decorate(ctx, x),
            None => Ok(x),
        }
    }

    fn modulate(&self, ctx: &mut Ctx, z: Var) -> Result<Var> {
        match &self.capm {
            Some(c) => c.forward(ctx, z),
            None => Ok(z),
        }
    }
}

impl Module for PromptState {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        if let Some(d) = &self.decorator {
            d.visit(f);
        }
        if let Some(c) = &self.capm {
            c.visit(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        if let Some(d) = &mut self.decorator {
            d.visit_mut(f);
        }
        if let Some(c) = &mut self.capm {
            c.visit_mut(f);
        }
    }
}

/// Source backbone plus prompts: the full parameter set `{psi, phi}` that
/// teacher and student copies share.
#[derive(Clone, Debug, PartialEq)]
pub struct PassModel {
    pub backbone: SegModel,
    pub prompts: PromptState,
}

impl PassModel {
    pub fn new(backbone: SegModel, prompts: PromptState) -> Self {
        Self { backbone, prompts }
    }

    pub fn source_only(backbone: SegModel) -> Self {
        Self::new(backbone, PromptState::default())
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        self.backbone.forward(ctx, x, Some(&self.prompts))
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.backbone.predict(x, Some(&self.prompts))
    }

    /// Folds queued running-stat updates into the decorator and, when
    /// `backbone` is set, into the backbone's BN layers.
    pub fn apply_running_updates(&mut self, updates: &[RunningUpdate], backbone: bool) {
        if let Some(d) = &mut self.prompts.decorator {
            d.apply_running_updates(updates);
        }
        if backbone {
            self.backbone.apply_running_updates(updates);
        }
    }
}

impl Module for PassModel {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.backbone.visit_params(f);
        self.prompts.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.backbone.visit_params_mut(f);
        self.prompts.visit_params_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Mode, ModelConfig, TrainPolicy};
    use rand::SeedableRng;

    fn backbone() -> SegModel {
        let cfg = ModelConfig {
            image_size: 16,
            widths: [4, 8, 8],
            bottleneck: 8,
            ..ModelConfig::default()
        };
        SegModel::new(cfg, 1).unwrap()
    }

    fn config(b: &SegModel) -> PromptConfig {
        PromptConfig {
            hidden: 4,
            bank_size: 8,
            top_k: 0.25,
            ..PromptConfig::for_model(b)
        }
    }

    fn image(seed: u64) -> Tensor {
        Tensor::uniform(&[2, 1, 16, 16], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn fresh_prompts_are_identities() {
        let b = backbone();
        let p = init_prompts(0, &config(&b)).unwrap();
        let x = image(1);
        let d = p.decorator.as_ref().unwrap();
        assert_eq!(d.decorate_input(&x).unwrap(), x);
        let z = Tensor::uniform(&[2, 8, 2, 2], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(p.capm.as_ref().unwrap().capm_forward(&z).unwrap(), z);
        let m = PassModel::new(b.clone(), p);
        assert_eq!(m.predict(&x).unwrap(), b.predict(&x, None).unwrap());
    }

    #[test]
    fn attention_rows_are_distributions() {
        let b = backbone();
        let p = init_prompts(3, &config(&b)).unwrap();
        let capm = p.capm.unwrap();
        let mut ctx = Ctx::eval();
        let z = ctx.input(&Tensor::uniform(
            &[1, 8, 2, 2],
            -1.0,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(4),
        ));
        let t = capm.forward_traced(&mut ctx, z).unwrap();
        let a = ctx.graph.value(t.attention[0]);
        assert_eq!(a.shape(), &[8, 8]);
        let sp = ctx.graph.data(t.sparse[0]);
        for r in 0..8 {
            let row = &a.data()[r * 8..(r + 1) * 8];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let kept = sp[r * 8..(r + 1) * 8].iter().filter(|&&v| v != 0.0).count();
            assert!(kept >= 2);
        }
    }

    #[test]
    fn gradients_reach_only_trainable_prompts() {
        let b = backbone();
        let m = PassModel::new(b, init_prompts(0, &config(&backbone())).unwrap());
        let mut ctx = Ctx::new(Mode::Eval, TrainPolicy::PROMPT_ONLY);
        let x = ctx.input(&image(5));
        let y = m.forward(&mut ctx, x).unwrap();
        let l = ctx.graph.sum(y);
        ctx.backward(l).unwrap();
        let grad = |name: &str| {
            ctx.graph
                .named_var(name)
                .and_then(|v| ctx.graph.grad(v))
                .map(<[f64]>::to_vec)
        };
        // zero-initialized value and output convs are the only nonzero entry points
        let gv = grad("capm.v.weight").unwrap();
        assert!(gv.iter().any(|&g| g != 0.0));
        let gid = grad("id.conv2.weight").unwrap();
        assert!(gid.iter().any(|&g| g != 0.0));
        assert!(grad("capm.q.weight").unwrap().iter().all(|&g| g == 0.0));
        assert!(grad("id.conv1.weight").unwrap().iter().all(|&g| g == 0.0));
        assert!(grad("enc0.conv.weight").is_none());
    }

    #[test]
    fn init_is_seeded() {
        let b = backbone();
        let c = config(&b);
        assert_eq!(init_prompts(7, &c).unwrap(), init_prompts(7, &c).unwrap());
        assert_ne!(init_prompts(7, &c).unwrap(), init_prompts(8, &c).unwrap());
    }

    #[test]
    fn zero_gain_zeroes_projections() {
        let b = backbone();
        let c = PromptConfig {
            gain: 0.0,
            ..config(&b)
        };
        let p = init_prompts(1, &c).unwrap();
        let capm = p.capm.unwrap();
        for conv in [&capm.params.q, &capm.params.k, &capm.params.v] {
            assert!(conv.params().iter().all(|p| p.value.data().iter().all(|&v| v == 0.0)));
        }
    }

    #[test]
    fn ablation_flags_drop_modules() {
        let b = backbone();
        let c = PromptConfig {
            use_id: false,
            ..config(&b)
        };
        let p = init_prompts(0, &c).unwrap();
        assert!(p.decorator.is_none() && p.capm.is_some());
        let c = PromptConfig {
            use_capm: false,
            ..config(&b)
        };
        assert!(init_prompts(0, &c).unwrap().capm.is_none());
    }

    #[test]
    fn invalid_configs() {
        let b = backbone();
        for c in [
            PromptConfig {
                bank_size: 0,
                ..config(&b)
            },
            PromptConfig {
                top_k: 0.0,
                ..config(&b)
            },
            PromptConfig {
                gain: f64::NAN,
                ..config(&b)
            },
            PromptConfig {
                bank_std: -1.0,
                ..config(&b)
            },
        ] {
            assert!(init_prompts(0, &c).is_err());
        }
    }
}
