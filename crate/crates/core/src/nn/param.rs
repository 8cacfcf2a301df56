use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

/// Which part of the adaptable model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Frozen source weights (convolutions, heads).
    Backbone,
    /// Affine scale/shift of the backbone's normalization layers.
    NormAffine,
    /// Everything introduced for adaptation: decorator, prompt bank, CAPM.
    Prompt,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, group: ParamGroup, value: Tensor) -> Self {
        Self {
            name: name.into(),
            group,
            value,
        }
    }
}

/// Which parameter groups receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainPolicy {
    pub backbone: bool,
    pub norm_affine: bool,
    pub prompt: bool,
}

impl TrainPolicy {
    pub const FROZEN: Self = Self {
        backbone: false,
        norm_affine: false,
        prompt: false,
    };
    pub const ALL: Self = Self {
        backbone: true,
        norm_affine: true,
        prompt: true,
    };
    /// Norm affine plus adaptation parameters; the test-time default.
    pub const ADAPT: Self = Self {
        backbone: false,
        norm_affine: true,
        prompt: true,
    };
    pub const NORM_ONLY: Self = Self {
        backbone: false,
        norm_affine: true,
        prompt: false,
    };
    pub const PROMPT_ONLY: Self = Self {
        backbone: false,
        norm_affine: false,
        prompt: true,
    };

    pub fn allows(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Backbone => self.backbone,
            ParamGroup::NormAffine => self.norm_affine,
            ParamGroup::Prompt => self.prompt,
        }
    }
}

/// Anything owning parameters, visited in a fixed order.
pub trait Module {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push(p));
        out
    }

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.value.zero_grad());
    }

    /// Copies leaf gradients recorded under each parameter's name back into
    /// the parameters.
    fn accumulate_grads(&mut self, g: &Graph) {
        self.visit_params_mut(&mut |p| {
            if let Some(grad) = g.named_var(&p.name).and_then(|v| g.grad(v)) {
                p.value.accumulate_grad(grad);
            }
        });
    }
}

/// Names of the parameters `policy` lets an optimizer touch.
pub fn select_trainable<M: Module + ?Sized>(model: &M, policy: TrainPolicy) -> Vec<String> {
    model
        .params()
        .into_iter()
        .filter(|p| policy.allows(p.group))
        .map(|p| p.name.clone())
        .collect()
}

/// How normalization layers pick their statistics for a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Batch statistics; tracked BN layers queue running-stat updates.
    Train,
    /// Running statistics for BN.
    Eval,
    /// Batch statistics everywhere, nothing tracked.
    BatchStats,
}

/// Target batch statistics recorded at one BN layer.
#[derive(Clone, Debug)]
pub struct LayerStats {
    pub layer: String,
    pub mean: Var,
    pub var: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningUpdate {
    pub layer: String,
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

/// A forward pass in progress: the tape plus the knobs layers consult.
pub struct Ctx {
    pub graph: Graph,
    pub mode: Mode,
    pub policy: TrainPolicy,
    /// Record per-layer batch statistics even where running stats are used.
    pub collect_stats: bool,
    pub stats: Vec<LayerStats>,
    pub running_updates: Vec<RunningUpdate>,
}

impl Ctx {
    pub fn new(mode: Mode, policy: TrainPolicy) -> Self {
        Self {
            graph: Graph::new(),
            mode,
            policy,
            collect_stats: false,
            stats: Vec::new(),
            running_updates: Vec::new(),
        }
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval, TrainPolicy::FROZEN)
    }

    pub fn with_stats(mut self) -> Self {
        self.collect_stats = true;
        self
    }

    pub fn bind(&mut self, p: &Param) -> Var {
        let trainable = self.policy.allows(p.group);
        self.graph.param(&p.name, &p.value, trainable)
    }

    pub fn input(&mut self, x: &Tensor) -> Var {
        self.graph.constant(x.clone())
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.graph.backward(loss)
    }
}
