use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::topk::topk_mask;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, Param, ParamGroup};
use crate::tensor::{Tensor, Var};

/// `L` learnable latent templates shared by every sample of a target domain.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapePromptBank {
    pub bank: Param,
}

impl ShapePromptBank {
    pub fn new<R: Rng + ?Sized>(size: usize, h: usize, w: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..size * h * w)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                v * std
            })
            .collect();
        let t = Tensor::new(&[size, h, w], data).expect("positive extents");
        Self {
            bank: Param::new("capm.bank", ParamGroup::Prompt, t),
        }
    }

    pub fn size(&self) -> usize {
        self.bank.value.shape()[0]
    }

    pub fn extent(&self) -> (usize, usize) {
        let s = self.bank.value.shape();
        (s[1], s[2])
    }

    /// Template `index` as a row-major `h x w` slice.
    pub fn template(&self, index: usize) -> &[f64] {
        let (h, w) = self.extent();
        &self.bank.value.data()[index * h * w..(index + 1) * h * w]
    }
}

/// Depthwise query/key/value projections and the top-k fraction.
#[derive(Clone, Debug, PartialEq)]
pub struct CapmParams {
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
    pub top_k: f64,
}

impl CapmParams {
    pub fn new<R: Rng + ?Sized>(channels: usize, bank_size: usize, top_k: f64, gain: f64, rng: &mut R) -> Self {
        let dw = |name: &str, c: usize, rng: &mut R| Conv2d::new(name, ParamGroup::Prompt, c, c, 3, 1, c, gain, rng);
        let q = dw("capm.q", channels, rng);
        let k = dw("capm.k", bank_size, rng);
        let v = dw("capm.v", bank_size, rng).zero_init();
        Self { q, k, v, top_k }
    }

    pub fn channels(&self) -> usize {
        self.q.cout()
    }
}

/// Bank plus modulator: turns a bottleneck feature into `z + A* V`.
#[derive(Clone, Debug, PartialEq)]
pub struct Capm {
    pub bank: ShapePromptBank,
    pub params: CapmParams,
}

/// Intermediate values of one modulator pass, for inspection in tests.
#[derive(Clone, Debug)]
pub struct CapmTrace {
    pub attention: Vec<Var>,
    pub sparse: Vec<Var>,
    pub values: Var,
    pub output: Var,
}

impl Capm {
    pub fn forward(&self, ctx: &mut Ctx, z: Var) -> Result<Var> {
        Ok(self.forward_traced(ctx, z)?.output)
    }

    pub fn forward_traced(&self, ctx: &mut Ctx, z: Var) -> Result<CapmTrace> {
        let shape = ctx.graph.shape(z).to_vec();
        let (h, w) = self.bank.extent();
        let l = self.bank.size();
        let c = self.params.channels();
        if shape.len() != 4 || shape[1] != c || shape[2] != h || shape[3] != w {
            return Err(Error::shape("capm_forward", &shape, &[0, c, h, w]));
        }
        let hw = h * w;
        let top_k = self.params.top_k;
        super::topk::keep_count(top_k, l)?;

        let q = self.params.q.forward(ctx, z)?;
        let bank = ctx.bind(&self.bank.bank);
        let bank = ctx.graph.reshape(bank, &[1, l, h, w])?;
        let k = self.params.k.forward(ctx, bank)?;
        let v = self.params.v.forward(ctx, bank)?;
        let g = &mut ctx.graph;
        let k = g.reshape(k, &[l, hw])?;
        let kt = g.transpose(k)?;
        let v = g.reshape(v, &[l, hw])?;
        let scale = 1.0 / (l as f64).sqrt();

        let mut attention = Vec::with_capacity(shape[0]);
        let mut sparse = Vec::with_capacity(shape[0]);
        let mut prompts = Vec::with_capacity(shape[0]);
        for b in 0..shape[0] {
            let qb = g.batch_select(q, b)?;
            let qb = g.reshape(qb, &[c, hw])?;
            let scores = g.matmul(qb, kt)?;
            let scores = g.mul_scalar(scores, scale);
            let a = g.softmax(scores, 1)?;
            let keep = topk_mask(g.data(a), c, l, top_k)?;
            let a_sparse = g.mask(a, keep)?;
            let sp = g.matmul(a_sparse, v)?;
            prompts.push(g.reshape(sp, &[1, c, h, w])?);
            attention.push(a);
            sparse.push(a_sparse);
        }
        let sp = if prompts.len() == 1 {
            prompts[0]
        } else {
            g.concat(&prompts, 0)?
        };
        let output = g.add(z, sp)?;
        Ok(CapmTrace {
            attention,
            sparse,
            values: v,
            output,
        })
    }

    /// Standalone evaluation of the modulated feature.
    pub fn capm_forward(&self, z: &Tensor) -> Result<Tensor> {
        let mut ctx = Ctx::eval();
        let v = ctx.input(z);
        let y = self.forward(&mut ctx, v)?;
        Ok(ctx.graph.value(y).clone())
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.bank.bank);
        for conv in [&self.params.q, &self.params.k, &self.params.v] {
            for p in conv.params() {
                f(p);
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.bank.bank);
        let CapmParams { q, k, v, .. } = &mut self.params;
        for conv in [q, k, v] {
            for p in conv.params_mut() {
                f(p);
            }
        }
    }
}
