use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, Mode, NormKind, NormLayer, Param, ParamGroup, RunningUpdate, LEAKY_SLOPE};
use crate::tensor::{Tensor, Var};

/// Sample-conditioned input prompt: `x + conv(act(norm(conv(x))))`.
///
/// The second convolution starts at zero, so a fresh decorator is an exact
/// identity.
#[derive(Clone, Debug, PartialEq)]
pub struct InputDecorator {
    pub conv1: Conv2d,
    pub norm: NormLayer,
    pub conv2: Conv2d,
}

impl InputDecorator {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        hidden: usize,
        norm: NormKind,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let conv1 = Conv2d::new("id.conv1", ParamGroup::Prompt, in_channels, hidden, 3, 1, 1, gain, rng);
        let conv2 = Conv2d::new("id.conv2", ParamGroup::Prompt, hidden, in_channels, 3, 1, 1, gain, rng).zero_init();
        Ok(Self {
            conv1,
            norm: NormLayer::new("id.norm", norm, hidden, ParamGroup::Prompt)?,
            conv2,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.conv2.cout()
    }

    /// The residual `ID(x)` alone.
    pub fn prompt(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let c = ctx.graph.shape(x).get(1).copied().unwrap_or(0);
        if c != self.in_channels() {
            return Err(Error::shape(
                "decorate_input",
                ctx.graph.shape(x),
                &[0, self.in_channels()],
            ));
        }
        let h = self.conv1.forward(ctx, x)?;
        // A batch-statistic decorator norm follows the adaptation phase, not
        // the backbone's mode: it learns while its parameters are trainable.
        let saved = ctx.mode;
        ctx.mode = if ctx.policy.prompt { Mode::Train } else { Mode::Eval };
        let h = self.norm.forward(ctx, h);
        ctx.mode = saved;
        let h = ctx.graph.leaky_relu(h?, LEAKY_SLOPE);
        self.conv2.forward(ctx, h)
    }

    /// `x + ID(x)`, unclamped.
    pub fn decorate(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let p = self.prompt(ctx, x)?;
        ctx.graph.add(x, p)
    }

    /// Standalone evaluation of `x + ID(x)`.
    pub fn decorate_input(&self, x: &Tensor) -> Result<Tensor> {
        let mut ctx = Ctx::eval();
        let v = ctx.input(x);
        let y = self.decorate(&mut ctx, v)?;
        Ok(ctx.graph.value(y).clone())
    }

    pub fn apply_running_updates(&mut self, updates: &[RunningUpdate]) {
        for u in updates {
            if u.layer == self.norm.name {
                self.norm.apply_running_update(u);
            }
        }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        for p in self.conv1.params() {
            f(p);
        }
        f(&self.norm.gamma);
        f(&self.norm.beta);
        for p in self.conv2.params() {
            f(p);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for p in self.conv1.params_mut() {
            f(p);
        }
        f(&mut self.norm.gamma);
        f(&mut self.norm.beta);
        for p in self.conv2.params_mut() {
            f(p);
        }
    }
}
