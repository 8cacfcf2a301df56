use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::nn::gradcheck::check_params;
use crate::nn::{Checkpoint, ModelConfig, Module, ParamGroup, SegModel, TrainPolicy};
use crate::prompts::{init_prompts, PassModel, PromptConfig};
use crate::tensor::gradcheck::{check, GradCheckOptions};
use crate::tensor::{Graph, PlaneGroups, Tensor, Var};
use crate::tta::{adaptation_loss, LossContext, LossKind};

/// Per-op and composite tolerances on the max relative error.
pub const OP_TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradOutcome {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub tol: f64,
}

impl GradOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -2.0, 2.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 0.5, 2.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Weighted sum so every output coordinate gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, y: Var) -> Result<Var> {
    let w = rand(g.shape(y), 9);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn unary(f: fn(&mut Graph, Var) -> Result<Var>) -> OpFn {
    Box::new(move |g, v| {
        let y = f(g, v[0])?;
        weighted_sum(g, y)
    })
}

fn binary(f: fn(&mut Graph, Var, Var) -> Result<Var>) -> OpFn {
    Box::new(move |g, v| {
        let y = f(g, v[0], v[1])?;
        weighted_sum(g, y)
    })
}

fn op_cases() -> Vec<(String, Vec<Tensor>, OpFn)> {
    let a = rand(&[3, 4], 1);
    let b = rand(&[3, 4], 2);
    let mut cases: Vec<(String, Vec<Tensor>, OpFn)> = vec![
        ("add".into(), vec![a.clone(), b.clone()], binary(|g, x, y| g.add(x, y))),
        ("sub".into(), vec![a.clone(), b.clone()], binary(|g, x, y| g.sub(x, y))),
        ("mul".into(), vec![a.clone(), b.clone()], binary(|g, x, y| g.mul(x, y))),
        (
            "mul broadcast".into(),
            vec![a.clone(), rand(&[4], 3)],
            binary(|g, x, y| g.mul(x, y)),
        ),
        (
            "div".into(),
            vec![a.clone(), positive(&[3, 4], 4)],
            binary(|g, x, y| g.div(x, y)),
        ),
        ("log".into(), vec![positive(&[3, 4], 4)], unary(|g, x| Ok(g.log(x)))),
        ("sqrt".into(), vec![positive(&[3, 4], 4)], unary(|g, x| Ok(g.sqrt(x)))),
        ("exp".into(), vec![a.clone()], unary(|g, x| Ok(g.exp(x)))),
        ("sigmoid".into(), vec![a.clone()], unary(|g, x| Ok(g.sigmoid(x)))),
        ("square".into(), vec![a.clone()], unary(|g, x| Ok(g.square(x)))),
        (
            "leaky relu".into(),
            vec![a.clone()],
            unary(|g, x| Ok(g.leaky_relu(x, 0.01))),
        ),
        (
            "scalar ops and mean".into(),
            vec![a.clone()],
            Box::new(|g, v| {
                let y = g.mul_scalar(v[0], -1.5);
                let y = g.add_scalar(y, 0.25);
                let y = g.square(y);
                Ok(g.mean(y))
            }),
        ),
        (
            "binary entropy".into(),
            vec![a.clone()],
            unary(|g, x| Ok(g.binary_entropy_logits(x))),
        ),
        (
            "bce".into(),
            vec![a],
            Box::new(|g, v| {
                let target: Vec<f64> = (0..12).map(|i| (i % 2) as f64).collect();
                let y = g.bce_logits(v[0], &target)?;
                weighted_sum(g, y)
            }),
        ),
        (
            "matmul".into(),
            vec![rand(&[3, 4], 5), rand(&[4, 2], 6)],
            binary(|g, x, y| g.matmul(x, y)),
        ),
        ("transpose".into(), vec![rand(&[3, 4], 5)], unary(|g, x| g.transpose(x))),
        (
            "softmax vector".into(),
            vec![rand(&[7], 7)],
            unary(|g, x| g.softmax(x, 0)),
        ),
        (
            "softmax columns".into(),
            vec![rand(&[3, 5], 8)],
            unary(|g, x| g.softmax(x, 0)),
        ),
        (
            "softmax rows".into(),
            vec![rand(&[3, 5], 8)],
            unary(|g, x| g.softmax(x, 1)),
        ),
        (
            "upsample".into(),
            vec![rand(&[2, 2, 2, 3], 15)],
            unary(|g, x| g.upsample2x(x)),
        ),
        (
            "concat select reshape".into(),
            vec![rand(&[2, 2, 2, 3], 15), rand(&[2, 1, 2, 3], 16)],
            Box::new(|g, v| {
                let c = g.concat(&[v[0], v[1]], 1)?;
                let s = g.batch_select(c, 1)?;
                let r = g.reshape(s, &[3, 6])?;
                weighted_sum(g, r)
            }),
        ),
    ];

    let x = rand(&[1, 2, 5, 5], 10);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        cases.push((
            format!("conv stride {stride} pad {pad}"),
            vec![x.clone(), rand(&[3, 2, 3, 3], 11), rand(&[3], 12)],
            Box::new(move |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad, 1)?;
                weighted_sum(g, y)
            }),
        ));
    }
    cases.push((
        "conv depthwise".into(),
        vec![x, rand(&[2, 1, 3, 3], 13), rand(&[2], 14)],
        Box::new(|g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1, 2)?;
            weighted_sum(g, y)
        }),
    ));

    let x = rand(&[2, 4, 3, 3], 17);
    let shape = x.shape().to_vec();
    let groupings = [
        ("instance", PlaneGroups::per_instance(&shape)),
        ("batch", PlaneGroups::per_channel(&shape)),
        ("layer", PlaneGroups::per_sample(&shape)),
        ("group", PlaneGroups::per_sample_group(&shape, 2).expect("2 divides 4")),
    ];
    for (name, groups) in groupings {
        let groups = Rc::new(groups);
        cases.push((
            format!("{name} norm"),
            vec![x.clone(), rand(&[4], 18), rand(&[4], 19)],
            Box::new(move |g, v| {
                let m = g.group_mean(v[0], &groups)?;
                let s = g.group_var(v[0], &groups)?;
                let n = g.normalize(v[0], m, s, 1e-5, &groups)?;
                let y = g.channel_affine(n, v[1], v[2])?;
                weighted_sum(g, y)
            }),
        ));
    }
    let groups = Rc::new(PlaneGroups::per_channel(&shape));
    cases.push((
        "norm with fixed stats".into(),
        vec![x, rand(&[4], 21), positive(&[4], 20)],
        Box::new(move |g, v| {
            let n = g.normalize(v[0], v[1], v[2], 1e-5, &groups)?;
            weighted_sum(g, n)
        }),
    ));
    cases
}

/// Small model with the zero-initialized prompt outputs randomized so every
/// branch carries gradient.
fn composite_model() -> Result<PassModel> {
    let cfg = ModelConfig {
        image_size: 16,
        widths: [4, 6, 8],
        bottleneck: 8,
        ..ModelConfig::default()
    };
    let backbone = SegModel::new(cfg, 11)?;
    let pc = PromptConfig {
        hidden: 4,
        bank_size: 10,
        top_k: 0.3,
        ..PromptConfig::for_model(&backbone)
    };
    let mut m = PassModel::new(backbone, init_prompts(12, &pc)?);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    m.visit_params_mut(&mut |p| {
        if p.group != ParamGroup::Backbone {
            for v in p.value.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    });
    Ok(m)
}

/// Decorator, backbone, modulator and loss checked together through the
/// adaptable parameters.
pub fn composite_check(kind: LossKind, coords: usize) -> Result<GradOutcome> {
    let m = composite_model()?;
    let priors = vec![0.3, 0.1];
    let lc = LossContext {
        source_stats: Checkpoint::from_model(&m.backbone, priors.clone()).source_stats()?,
        class_priors: priors,
    };
    let x = Tensor::uniform(&[2, 1, 16, 16], -1.5, 1.5, &mut ChaCha8Rng::seed_from_u64(14));
    let opts = GradCheckOptions {
        max_coords: Some(coords),
        seed: 15,
        ..GradCheckOptions::default()
    };
    let r = check_params(&m, TrainPolicy::ADAPT, opts, |m, ctx| {
        ctx.collect_stats = kind == LossKind::BnStat;
        let xv = ctx.input(&x);
        let y = m.forward(ctx, xv)?;
        adaptation_loss(ctx, kind, y, &lc)
    })?;
    Ok(GradOutcome {
        name: format!("composite {kind}"),
        max_rel_error: r.max_rel_error,
        checked: r.checked,
        tol: COMPOSITE_TOL,
    })
}

/// Every differentiable op, then the full model under each loss.
pub fn gradient_suite() -> Result<Vec<GradOutcome>> {
    let mut out = Vec::new();
    for (name, inputs, f) in op_cases() {
        let r = check(&inputs, GradCheckOptions::default(), &f)?;
        out.push(GradOutcome {
            name,
            max_rel_error: r.max_rel_error,
            checked: r.checked,
            tol: OP_TOL,
        });
    }
    for kind in [LossKind::Tent, LossKind::BnStat, LossKind::ClassRatio] {
        out.push(composite_check(kind, 400)?);
    }
    Ok(out)
}
