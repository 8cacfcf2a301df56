//! Central differences taken directly on a module's parameters, so whole
//! models can be checked end to end.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::param::{Ctx, Module, TrainPolicy};
use crate::error::{Error, Result};
use crate::tensor::gradcheck::{rel_error, GradCheckOptions, GradCheckReport};
use crate::tensor::Var;

/// Checks the gradient of the scalar built by `f` with respect to every
/// parameter `policy` allows. `f` receives a fresh context bound to `policy`.
pub fn check_params<M, F>(model: &M, policy: TrainPolicy, opts: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    M: Module + Clone,
    F: Fn(&M, &mut Ctx) -> Result<Var>,
{
    let mut ctx = Ctx::new(super::Mode::Eval, policy);
    let loss = f(model, &mut ctx)?;
    if ctx.graph.value(loss).numel() != 1 {
        return Err(Error::shape("gradcheck loss", ctx.graph.shape(loss), &[1]));
    }
    ctx.backward(loss)?;
    let mut analytic = Vec::new();
    let mut sizes = Vec::new();
    for p in model.params() {
        if !policy.allows(p.group) {
            continue;
        }
        let n = p.value.numel();
        let g = ctx
            .graph
            .named_var(&p.name)
            .and_then(|v| ctx.graph.grad(v))
            .map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
        analytic.push(g);
        sizes.push((p.name.clone(), n));
    }

    let eval = |m: &M| -> Result<f64> {
        let mut ctx = Ctx::new(super::Mode::Eval, policy);
        let out = f(m, &mut ctx)?;
        Ok(ctx.graph.data(out)[0])
    };

    let total: usize = sizes.iter().map(|s| s.1).sum();
    let coords: Vec<usize> = match opts.max_coords {
        Some(n) if n < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut picked = sample(&mut rng, total, n).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..total).collect(),
    };

    let mut work = model.clone();
    let mut max_rel: f64 = 0.0;
    for &flat in &coords {
        let (pi, j) = locate(&sizes, flat);
        let name = &sizes[pi].0;
        let orig = value_at(&work, name, j);
        set_at(&mut work, name, j, orig + opts.step);
        let up = eval(&work)?;
        set_at(&mut work, name, j, orig - opts.step);
        let down = eval(&work)?;
        set_at(&mut work, name, j, orig);
        let numeric = (up - down) / (2.0 * opts.step);
        max_rel = max_rel.max(rel_error(analytic[pi][j], numeric));
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        checked: coords.len(),
    })
}

fn value_at<M: Module>(m: &M, name: &str, j: usize) -> f64 {
    m.params()
        .into_iter()
        .find(|p| p.name == name)
        .map(|p| p.value.data()[j])
        .expect("parameter listed above")
}

fn set_at<M: Module>(m: &mut M, name: &str, j: usize, v: f64) {
    m.visit_params_mut(&mut |p| {
        if p.name == name {
            p.value.data_mut()[j] = v;
        }
    });
}

fn locate(sizes: &[(String, usize)], mut flat: usize) -> (usize, usize) {
    for (i, (_, n)) in sizes.iter().enumerate() {
        if flat < *n {
            return (i, flat);
        }
        flat -= n;
    }
    unreachable!("coordinate out of range")
}
