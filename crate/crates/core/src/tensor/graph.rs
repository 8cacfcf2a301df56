use std::collections::BTreeMap;
use std::rc::Rc;

use super::kernels::{conv2d_backward, conv2d_forward, conv_out_extent, matmul_into, ConvGeometry};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Assignment of each `(batch, channel)` plane of a `[B, C, ...]` tensor to
/// a statistic group. Covers instance, batch, layer and group normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneGroups {
    plane_group: Vec<usize>,
    groups: usize,
    plane_len: usize,
    group_len: Vec<usize>,
}

impl PlaneGroups {
    fn build(shape: &[usize], groups: usize, assign: impl Fn(usize, usize) -> usize) -> Self {
        let (b, c) = (shape[0], shape[1]);
        let plane_len = shape[2..].iter().product::<usize>().max(1);
        let mut plane_group = Vec::with_capacity(b * c);
        let mut group_len = vec![0; groups];
        for bi in 0..b {
            for ci in 0..c {
                let g = assign(bi, ci);
                group_len[g] += plane_len;
                plane_group.push(g);
            }
        }
        Self {
            plane_group,
            groups,
            plane_len,
            group_len,
        }
    }

    /// One group per `(sample, channel)`.
    pub fn per_instance(shape: &[usize]) -> Self {
        let c = shape[1];
        Self::build(shape, shape[0] * c, |b, ch| b * c + ch)
    }

    /// One group per channel, pooled over the batch.
    pub fn per_channel(shape: &[usize]) -> Self {
        Self::build(shape, shape[1], |_, ch| ch)
    }

    /// One group per sample.
    pub fn per_sample(shape: &[usize]) -> Self {
        Self::build(shape, shape[0], |b, _| b)
    }

    /// `num_groups` contiguous channel groups per sample.
    pub fn per_sample_group(shape: &[usize], num_groups: usize) -> Result<Self> {
        let c = shape[1];
        if num_groups == 0 || !c.is_multiple_of(num_groups) {
            return Err(Error::InvalidGroups {
                groups: num_groups,
                cin: c,
                cout: c,
            });
        }
        let per = c / num_groups;
        Ok(Self::build(shape, shape[0] * num_groups, |b, ch| {
            b * num_groups + ch / per
        }))
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    fn planes(&self) -> impl Iterator<Item = (usize, std::ops::Range<usize>)> + '_ {
        let n = self.plane_len;
        self.plane_group
            .iter()
            .enumerate()
            .map(move |(p, &g)| (g, p * n..(p + 1) * n))
    }

    fn means(&self, x: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.groups];
        for (g, r) in self.planes() {
            acc[g] += x[r].iter().sum::<f64>();
        }
        acc.iter_mut().zip(&self.group_len).for_each(|(a, &n)| *a /= n as f64);
        acc
    }

    fn variances(&self, x: &[f64], mean: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.groups];
        for (g, r) in self.planes() {
            let m = mean[g];
            acc[g] += x[r].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
        acc.iter_mut().zip(&self.group_len).for_each(|(a, &n)| *a /= n as f64);
        acc
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnaryKind {
    Exp,
    Log,
    Sqrt,
    Sigmoid,
    LeakyRelu(f64),
    Square,
    AddScalar(f64),
    MulScalar(f64),
    BinaryEntropyLogits,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary(BinaryKind, Var, Var),
    Unary(UnaryKind, Var),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    Reshape(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geo: ConvGeometry,
    },
    Upsample2x(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    BatchSelect {
        input: Var,
        index: usize,
    },
    GroupMean {
        input: Var,
        groups: Rc<PlaneGroups>,
    },
    GroupVar {
        input: Var,
        groups: Rc<PlaneGroups>,
    },
    Normalize {
        input: Var,
        mean: Var,
        var: Var,
        eps: f64,
        groups: Rc<PlaneGroups>,
    },
    ChannelAffine {
        input: Var,
        scale: Var,
        shift: Var,
    },
    Mask {
        input: Var,
        keep: Rc<Vec<bool>>,
    },
    BceLogits {
        input: Var,
        target: Rc<Vec<f64>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Operation tape. Values are recorded in execution order, so the node
/// list is already topologically sorted for the reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    named: BTreeMap<String, Var>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Largest element count of any recorded value.
    pub fn peak_numel(&self) -> usize {
        self.nodes.iter().map(|n| n.value.numel()).max().unwrap_or(0)
    }

    pub fn node_shapes(&self) -> impl Iterator<Item = &[usize]> {
        self.nodes.iter().map(|n| n.value.shape())
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(
            value.data().iter().all(|v| v.is_finite()),
            "non-finite value produced by {op:?}"
        );
        value.requires_grad = requires_grad;
        value.grad = None;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Gradient accumulated on a node by [`Graph::backward`]; only leaves keep one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    /// Records a leaf; it takes part in differentiation iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a named parameter leaf. Binding the same name twice returns
    /// the first binding.
    pub fn param(&mut self, name: &str, t: &Tensor, trainable: bool) -> Var {
        if let Some(&v) = self.named.get(name) {
            return v;
        }
        let mut copy = Tensor::new(t.shape(), t.data().to_vec()).expect("valid tensor");
        copy.requires_grad = trainable;
        let v = self.push(copy, Op::Leaf, trainable);
        self.named.insert(name.to_string(), v);
        v
    }

    pub fn named_var(&self, name: &str) -> Option<Var> {
        self.named.get(name).copied()
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, Var)> {
        self.named.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    // ---- elementwise -------------------------------------------------

    /// Elementwise op where the smaller operand is a scalar or a trailing
    /// suffix of the larger operand's shape.
    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = if sa == sb || broadcastable(&sb, &sa) {
            sa.clone()
        } else if broadcastable(&sa, &sb) {
            sb.clone()
        } else {
            return Err(Error::shape("elementwise", &sa, &sb));
        };
        let (da, db) = (self.data(a), self.data(b));
        let n: usize = out_shape.iter().product();
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let data: Vec<f64> = (0..n).map(|i| f(da[i % da.len()], db[i % db.len()])).collect();
        let rg = self.rg(a) || self.rg(b);
        let t = Tensor::new(&out_shape, data)?;
        Ok(self.push(t, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let src = self.value(a);
        let data = src
            .data()
            .iter()
            .map(|&x| match kind {
                UnaryKind::Exp => x.exp(),
                UnaryKind::Log => x.ln(),
                UnaryKind::Sqrt => x.sqrt(),
                UnaryKind::Sigmoid => sigmoid(x),
                UnaryKind::LeakyRelu(s) => {
                    if x > 0.0 {
                        x
                    } else {
                        s * x
                    }
                }
                UnaryKind::Square => x * x,
                UnaryKind::AddScalar(c) => x + c,
                UnaryKind::MulScalar(c) => x * c,
                UnaryKind::BinaryEntropyLogits => {
                    let p = sigmoid(x);
                    p * softplus(-x) + (1.0 - p) * softplus(x)
                }
            })
            .collect();
        let t = Tensor::new(src.shape(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Unary(kind, a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Log, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sqrt, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(UnaryKind::LeakyRelu(slope), a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Square, a)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(UnaryKind::AddScalar(c), a)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(UnaryKind::MulScalar(c), a)
    }

    /// Binary entropy of `sigmoid(a)`, evaluated without forming logs of
    /// probabilities so saturated logits stay finite.
    pub fn binary_entropy_logits(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::BinaryEntropyLogits, a)
    }

    /// Per-element binary cross entropy between `sigmoid(a)` and `target`.
    pub fn bce_logits(&mut self, a: Var, target: &[f64]) -> Result<Var> {
        let src = self.value(a);
        if src.numel() != target.len() {
            return Err(Error::shape("bce_logits", src.shape(), &[target.len()]));
        }
        let data = src
            .data()
            .iter()
            .zip(target)
            .map(|(&x, &t)| softplus(x) - x * t)
            .collect();
        let t = Tensor::new(src.shape(), data)?;
        let rg = self.rg(a);
        Ok(self.push(
            t,
            Op::BceLogits {
                input: a,
                target: Rc::new(target.to_vec()),
            },
            rg,
        ))
    }

    // ---- reductions & shape -----------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.data(a), false, self.data(b), false, &mut out, m, k, n, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::InvalidAxis { axis: 1, rank: s.len() });
        }
        let (r, c) = (s[0], s[1]);
        let out = transpose_buf(self.data(a), r, c);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(a), rg))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.data(a);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let m = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (x[idx(j)] - m).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[idx(j)] /= z;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { input: a, axis }, rg))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if si.len() != 4 || sw.len() != 4 {
            return Err(Error::shape("conv2d", &si, &sw));
        }
        let (cin, cout) = (si[1], sw[0]);
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::InvalidGroups { groups, cin, cout });
        }
        if sw[1] != cin / groups {
            return Err(Error::shape("conv2d", &si, &sw));
        }
        let (kh, kw) = (sw[2], sw[3]);
        let ho = conv_out_extent(si[2], kh, stride, padding).ok_or_else(|| Error::shape("conv2d", &si, &sw))?;
        let wo = conv_out_extent(si[3], kw, stride, padding).ok_or_else(|| Error::shape("conv2d", &si, &sw))?;
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[cout]));
            }
        }
        let geo = ConvGeometry {
            batch: si[0],
            cin,
            h: si[2],
            w: si[3],
            cout,
            kh,
            kw,
            stride,
            padding,
            groups,
            ho,
            wo,
        };
        let out = conv2d_forward(&geo, self.data(input), self.data(weight), bias.map(|b| self.data(b)));
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        let t = Tensor::new(&[si[0], cout, ho, wo], out)?;
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                weight,
                bias,
                geo,
            },
            rg,
        ))
    }

    /// Nearest-neighbour x2 upsampling of a `[B, C, H, W]` tensor.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("upsample2x", &s, &[0, 0, 0, 0]));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let x = self.data(a);
        let mut out = vec![0.0; planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = x[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(a);
        let t = Tensor::new(&[s[0], s[1], 2 * h, 2 * w], out)?;
        Ok(self.push(t, Op::Upsample2x(a), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: first.len(),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Sample `index` of a batch-major value, keeping a leading extent of 1.
    pub fn batch_select(&mut self, a: Var, index: usize) -> Result<Var> {
        let s = self.shape(a);
        if index >= s[0] {
            return Err(Error::shape("batch_select", s, &[index]));
        }
        let t = self.value(a).batch_item(index);
        let rg = self.rg(a);
        Ok(self.push(t, Op::BatchSelect { input: a, index }, rg))
    }

    // ---- normalization ----------------------------------------------

    pub fn group_mean(&mut self, a: Var, groups: &Rc<PlaneGroups>) -> Result<Var> {
        self.check_groups(a, groups)?;
        let m = groups.means(self.data(a));
        let rg = self.rg(a);
        let t = Tensor::new(&[groups.groups], m)?;
        Ok(self.push(
            t,
            Op::GroupMean {
                input: a,
                groups: groups.clone(),
            },
            rg,
        ))
    }

    /// Biased (population) variance per group.
    pub fn group_var(&mut self, a: Var, groups: &Rc<PlaneGroups>) -> Result<Var> {
        self.check_groups(a, groups)?;
        let x = self.data(a);
        let m = groups.means(x);
        let v = groups.variances(x, &m);
        let rg = self.rg(a);
        let t = Tensor::new(&[groups.groups], v)?;
        Ok(self.push(
            t,
            Op::GroupVar {
                input: a,
                groups: groups.clone(),
            },
            rg,
        ))
    }

    /// `(x - mean[g]) / sqrt(var[g] + eps)` where `g` is the plane's group.
    pub fn normalize(&mut self, a: Var, mean: Var, var: Var, eps: f64, groups: &Rc<PlaneGroups>) -> Result<Var> {
        self.check_groups(a, groups)?;
        for s in [self.shape(mean), self.shape(var)] {
            if s != [groups.groups] {
                return Err(Error::shape("normalize stats", s, &[groups.groups]));
            }
        }
        let (x, m, v) = (self.data(a), self.data(mean), self.data(var));
        let mut out = vec![0.0; x.len()];
        for (g, r) in groups.planes() {
            let inv = 1.0 / (v[g] + eps).sqrt();
            for i in r {
                out[i] = (x[i] - m[g]) * inv;
            }
        }
        let rg = self.rg(a) || self.rg(mean) || self.rg(var);
        let t = Tensor::new(self.shape(a), out)?;
        Ok(self.push(
            t,
            Op::Normalize {
                input: a,
                mean,
                var,
                eps,
                groups: groups.clone(),
            },
            rg,
        ))
    }

    /// Per-channel `x * scale[c] + shift[c]` on a `[B, C, ...]` tensor.
    pub fn channel_affine(&mut self, a: Var, scale: Var, shift: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let c = s[1];
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return Err(Error::shape("channel_affine", &s, self.shape(scale)));
        }
        let plane: usize = s[2..].iter().product();
        let (x, sc, sh) = (self.data(a), self.data(scale), self.data(shift));
        let out = x
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / plane) % c;
                v * sc[ch] + sh[ch]
            })
            .collect();
        let rg = self.rg(a) || self.rg(scale) || self.rg(shift);
        let t = Tensor::new(&s, out)?;
        Ok(self.push(t, Op::ChannelAffine { input: a, scale, shift }, rg))
    }

    /// Zeroes entries where `keep` is false; gradient flows only through kept entries.
    pub fn mask(&mut self, a: Var, keep: Vec<bool>) -> Result<Var> {
        let src = self.value(a);
        if keep.len() != src.numel() {
            return Err(Error::shape("mask", src.shape(), &[keep.len()]));
        }
        let out = src
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v } else { 0.0 })
            .collect();
        let t = Tensor::new(src.shape(), out)?;
        let rg = self.rg(a);
        Ok(self.push(
            t,
            Op::Mask {
                input: a,
                keep: Rc::new(keep),
            },
            rg,
        ))
    }

    fn check_groups(&self, a: Var, groups: &PlaneGroups) -> Result<()> {
        let s = self.shape(a);
        let planes = s.get(..2).map(|p| p[0] * p[1]).unwrap_or(0);
        let plane_len: usize = s.get(2..).map(|t| t.iter().product()).unwrap_or(0);
        if s.len() < 2 || planes != groups.plane_group.len() || plane_len.max(1) != groups.plane_len {
            return Err(Error::shape("plane groups", s, &[groups.plane_group.len()]));
        }
        Ok(())
    }

    // ---- backward ---------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar(shape.to_vec()));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].value.requires_grad {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            if let Op::Leaf = op {
                self.nodes[idx].value.accumulate_grad(&g);
                continue;
            }
            for (v, contrib) in self.local_grads(idx, &op, &g) {
                if !self.rg(v) {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, op: &Op, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let out = self.nodes[idx].value.data();
        match *op {
            Op::Leaf => vec![],
            Op::Binary(kind, a, b) => {
                let (da, db) = (self.data(a), self.data(b));
                let mut ga = vec![0.0; da.len()];
                let mut gb = vec![0.0; db.len()];
                for (i, &gi) in g.iter().enumerate() {
                    let (ia, ib) = (i % da.len(), i % db.len());
                    let (x, y) = (da[ia], db[ib]);
                    let (pa, pb) = match kind {
                        BinaryKind::Add => (1.0, 1.0),
                        BinaryKind::Sub => (1.0, -1.0),
                        BinaryKind::Mul => (y, x),
                        BinaryKind::Div => (1.0 / y, -x / (y * y)),
                    };
                    ga[ia] += gi * pa;
                    gb[ib] += gi * pb;
                }
                vec![(a, ga), (b, gb)]
            }
            Op::Unary(kind, a) => {
                let x = self.data(a);
                let ga = x
                    .iter()
                    .zip(out)
                    .zip(g)
                    .map(|((&x, &y), &gy)| {
                        gy * match kind {
                            UnaryKind::Exp => y,
                            UnaryKind::Log => 1.0 / x,
                            UnaryKind::Sqrt => 0.5 / y,
                            UnaryKind::Sigmoid => y * (1.0 - y),
                            UnaryKind::LeakyRelu(s) => {
                                if x > 0.0 {
                                    1.0
                                } else {
                                    s
                                }
                            }
                            UnaryKind::Square => 2.0 * x,
                            UnaryKind::AddScalar(_) => 1.0,
                            UnaryKind::MulScalar(c) => c,
                            UnaryKind::BinaryEntropyLogits => {
                                let p = sigmoid(x);
                                -x * p * (1.0 - p)
                            }
                        }
                    })
                    .collect();
                vec![(a, ga)]
            }
            Op::BceLogits { input, ref target } => {
                let x = self.data(input);
                let ga = x
                    .iter()
                    .zip(target.iter())
                    .zip(g)
                    .map(|((&x, &t), &gy)| gy * (sigmoid(x) - t))
                    .collect();
                vec![(input, ga)]
            }
            Op::Sum(a) => vec![(a, vec![g[0]; self.value(a).numel()])],
            Op::Mean(a) => {
                let n = self.value(a).numel();
                vec![(a, vec![g[0] / n as f64; n])]
            }
            Op::Reshape(a) => vec![(a, g.to_vec())],
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                if self.rg(a) {
                    matmul_into(g, false, self.data(b), true, &mut ga, m, n, k, 0.0);
                }
                if self.rg(b) {
                    matmul_into(self.data(a), true, g, false, &mut gb, k, m, n, 0.0);
                }
                vec![(a, ga), (b, gb)]
            }
            Op::Transpose(a) => {
                let s = self.shape(a);
                vec![(a, transpose_buf(g, s[1], s[0]))]
            }
            Op::Softmax { input, axis } => {
                let (outer, len, inner) = axis_split(self.shape(input), axis);
                let mut gx = vec![0.0; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[idx(j)] * out[idx(j)]).sum();
                        for j in 0..len {
                            gx[idx(j)] = out[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                vec![(input, gx)]
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                ref geo,
            } => {
                let (gi, gw, gb) = conv2d_backward(
                    geo,
                    self.data(input),
                    self.data(weight),
                    g,
                    self.rg(input),
                    self.rg(weight),
                    bias.is_some_and(|b| self.rg(b)),
                );
                let mut res = Vec::new();
                if let Some(gi) = gi {
                    res.push((input, gi));
                }
                if let Some(gw) = gw {
                    res.push((weight, gw));
                }
                if let (Some(b), Some(gb)) = (bias, gb) {
                    res.push((b, gb));
                }
                res
            }
            Op::Upsample2x(a) => {
                let s = self.shape(a);
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let mut ga = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            ga[(p * h + y / 2) * w + x / 2] += g[(p * 2 * h + y) * 2 * w + x];
                        }
                    }
                }
                vec![(a, ga)]
            }
            Op::Concat { ref inputs, axis } => {
                let shape = self.shape(inputs[0]);
                let (outer, _, inner) = axis_split(shape, axis);
                let mut parts: Vec<Vec<f64>> = inputs
                    .iter()
                    .map(|&v| Vec::with_capacity(self.value(v).numel()))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (k, &v) in inputs.iter().enumerate() {
                        let chunk = self.shape(v)[axis] * inner;
                        parts[k].extend_from_slice(&g[off..off + chunk]);
                        off += chunk;
                    }
                }
                inputs.iter().copied().zip(parts).collect()
            }
            Op::BatchSelect { input, index } => {
                let n = self.value(input).numel();
                let mut ga = vec![0.0; n];
                let per = g.len();
                ga[index * per..(index + 1) * per].copy_from_slice(g);
                vec![(input, ga)]
            }
            Op::GroupMean { input, ref groups } => {
                let mut ga = vec![0.0; self.value(input).numel()];
                for (gi, r) in groups.planes() {
                    let v = g[gi] / groups.group_len[gi] as f64;
                    ga[r].iter_mut().for_each(|x| *x = v);
                }
                vec![(input, ga)]
            }
            Op::GroupVar { input, ref groups } => {
                let x = self.data(input);
                let m = groups.means(x);
                let mut ga = vec![0.0; x.len()];
                for (gi, r) in groups.planes() {
                    let scale = 2.0 * g[gi] / groups.group_len[gi] as f64;
                    for i in r {
                        ga[i] = scale * (x[i] - m[gi]);
                    }
                }
                vec![(input, ga)]
            }
            Op::Normalize {
                input,
                mean,
                var,
                eps,
                ref groups,
            } => {
                let (x, m, v) = (self.data(input), self.data(mean), self.data(var));
                let mut gx = vec![0.0; x.len()];
                let mut gm = vec![0.0; m.len()];
                let mut gv = vec![0.0; v.len()];
                for (gi, r) in groups.planes() {
                    let inv = 1.0 / (v[gi] + eps).sqrt();
                    let inv3 = inv * inv * inv;
                    for i in r {
                        gx[i] = g[i] * inv;
                        gm[gi] -= g[i] * inv;
                        gv[gi] += -0.5 * g[i] * (x[i] - m[gi]) * inv3;
                    }
                }
                vec![(input, gx), (mean, gm), (var, gv)]
            }
            Op::ChannelAffine { input, scale, shift } => {
                let s = self.shape(input);
                let c = s[1];
                let plane: usize = s[2..].iter().product();
                let (x, sc) = (self.data(input), self.data(scale));
                let mut gx = vec![0.0; x.len()];
                let mut gs = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for i in 0..x.len() {
                    let ch = (i / plane) % c;
                    gx[i] = g[i] * sc[ch];
                    gs[ch] += g[i] * x[i];
                    gb[ch] += g[i];
                }
                vec![(input, gx), (scale, gs), (shift, gb)]
            }
            Op::Mask { input, ref keep } => {
                let ga = g
                    .iter()
                    .zip(keep.iter())
                    .map(|(&v, &k)| if k { v } else { 0.0 })
                    .collect();
                vec![(input, ga)]
            }
        }
    }
}

fn broadcastable(small: &[usize], big: &[usize]) -> bool {
    let n: usize = small.iter().product();
    n == 1 || (small.len() <= big.len() && big.ends_with(small))
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn transpose_buf(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}
