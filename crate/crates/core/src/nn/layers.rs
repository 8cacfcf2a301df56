use rand::Rng;

use super::norm::{NormKind, NormLayer};
use super::param::{Ctx, Param, ParamGroup};
use crate::error::Result;
use crate::tensor::{Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.01;

/// Gain for fan-in scaled init in front of a leaky ReLU.
pub fn kaiming_gain() -> f64 {
    (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    /// Weights drawn from `N(0, (gain / sqrt(fan_in))^2)`, bias zero.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = (cin / groups) * kernel * kernel;
        let std = gain / (fan_in as f64).sqrt();
        let weight = Tensor::randn(&[cout, cin / groups, kernel, kernel], std, rng);
        Self {
            weight: Param::new(format!("{name}.weight"), group, weight),
            bias: Param::new(format!("{name}.bias"), group, Tensor::zeros(&[cout])),
            stride,
            padding: kernel / 2,
            groups,
        }
    }

    pub fn zero_init(mut self) -> Self {
        self.weight.value.data_mut().fill(0.0);
        self.bias.value.data_mut().fill(0.0);
        self
    }

    pub fn cout(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.bind(&self.weight);
        let b = ctx.bind(&self.bias);
        ctx.graph.conv2d(x, w, Some(b), self.stride, self.padding, self.groups)
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// 3x3 convolution, normalization, leaky ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: NormLayer,
}

impl ConvBlock {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        norm: NormKind,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(
                &format!("{name}.conv"),
                ParamGroup::Backbone,
                cin,
                cout,
                3,
                stride,
                1,
                kaiming_gain(),
                rng,
            ),
            norm: NormLayer::new(&format!("{name}.norm"), norm, cout, ParamGroup::NormAffine)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.norm.forward(ctx, y)?;
        Ok(ctx.graph.leaky_relu(y, LEAKY_SLOPE))
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        for p in self.conv.params() {
            f(p);
        }
        f(&self.norm.gamma);
        f(&self.norm.beta);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for p in self.conv.params_mut() {
            f(p);
        }
        f(&mut self.norm.gamma);
        f(&mut self.norm.beta);
    }
}
