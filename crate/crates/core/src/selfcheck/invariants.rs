use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::oracles::{brute_dice, brute_hd95, brute_topk_row, random_mask};
use crate::bench::{default_benchmark, dice, generate_domain, hd95, Mask};
use crate::error::Result;
use crate::nn::{ModelConfig, Module, SegModel};
use crate::prompts::{init_prompts, topk_mask, PassModel, PromptConfig};
use crate::tensor::Tensor;
use crate::tta::{adapt_online, adapt_online_observed, LossContext, OnlineConfig, OnlineEvent, UpdateScheme};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InvariantOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, passed: bool, detail: String) -> InvariantOutcome {
    InvariantOutcome { name, passed, detail }
}

fn tiny_model() -> Result<PassModel> {
    let cfg = ModelConfig {
        image_size: 16,
        widths: [4, 8, 8],
        bottleneck: 8,
        ..ModelConfig::default()
    };
    let backbone = SegModel::new(cfg, 21)?;
    let pc = PromptConfig {
        hidden: 4,
        bank_size: 8,
        top_k: 0.25,
        ..PromptConfig::for_model(&backbone)
    };
    Ok(PassModel::new(backbone, init_prompts(22, &pc)?))
}

fn random_stream(n: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Tensor::uniform(&[1, 1, 16, 16], -1.0, 1.0, &mut rng))
        .collect()
}

fn empty_context() -> LossContext {
    LossContext {
        source_stats: Vec::new(),
        class_priors: vec![0.2, 0.1],
    }
}

/// Largest deviation of the recorded momentum trace from its closed form.
pub fn momentum_trace_error(cfg: &OnlineConfig, samples: usize) -> Result<f64> {
    let r = adapt_online(&tiny_model()?, &random_stream(samples, 1), cfg, &empty_context())?;
    Ok(r.records
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let wi = cfg.omega.powi(i as i32);
            let closed = cfg.c * (1.0 - wi) / (1.0 - cfg.omega) + cfg.m0 * wi;
            (rec.momentum.unwrap_or(f64::NAN) - closed).abs()
        })
        .fold(0.0, f64::max))
}

/// Matrices whose top-k survivors disagree with the rank rule, out of `n`.
pub fn topk_disagreements(n: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..n {
        let rows = rng.random_range(1..8);
        let cols = rng.random_range(1..24);
        let k = rng.random_range(0.01..=1.0);
        // coarse values so ties are common
        let levels = rng.random_range(2..6);
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
            .collect();
        let keep = topk_mask(&data, rows, cols, k)?;
        let expected: Vec<bool> = data.chunks(cols).flat_map(|r| brute_topk_row(r, k)).collect();
        bad += (keep != expected) as usize;
    }
    Ok(bad)
}

/// Mask pairs where Dice or HD95 differ from the brute-force oracles, out of `n`.
pub fn metric_disagreements(n: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..n {
        let h = rng.random_range(1..=32);
        let w = rng.random_range(1..=32);
        let a = random_mask(&mut rng, h, w);
        let b = random_mask(&mut rng, h, w);
        let same = dice(&a, &b)? == brute_dice(&a, &b) && hd95(&a, &b)? == brute_hd95(&a, &b);
        bad += (!same) as usize;
    }
    Ok(bad)
}

pub fn invariant_suite() -> Result<Vec<InvariantOutcome>> {
    let mut out = Vec::new();

    let cfg = OnlineConfig::default();
    let err = momentum_trace_error(&cfg, 40)?;
    out.push(outcome(
        "momentum closed form",
        err < 1e-12,
        format!("max error {err:.3e}"),
    ));

    let model = tiny_model()?;
    let xs = random_stream(4, 2);
    let zero = OnlineConfig {
        steps_per_sample: 0,
        ..OnlineConfig::default()
    };
    let r = adapt_online(&model, &xs, &zero, &empty_context())?;
    let mut identical = r.final_model.as_ref() == Some(&model);
    for (x, rec) in xs.iter().zip(&r.records) {
        identical &= rec.prediction == Mask::from_logits(&model.backbone.predict(x, None)?)?;
    }
    out.push(outcome(
        "residual identity at init",
        identical,
        "zero steps vs bare backbone".into(),
    ));

    let mut reset_ok = true;
    let mut drift_ok = true;
    adapt_online_observed(
        &model,
        &xs,
        &OnlineConfig::default(),
        &empty_context(),
        &mut |e| match e {
            OnlineEvent::Reset { teacher, student, .. } => reset_ok &= teacher == student,
            OnlineEvent::TeacherUpdated {
                previous,
                student,
                teacher,
                momentum,
                ..
            } => {
                let diff = |a: &PassModel, b: &PassModel| {
                    a.params()
                        .iter()
                        .zip(b.params())
                        .flat_map(|(p, q)| p.value.data().iter().zip(q.value.data()).map(|(x, y)| (x - y).abs()))
                        .fold(0.0, f64::max)
                };
                drift_ok &= diff(teacher, previous) <= momentum * diff(student, previous) + 1e-15;
            }
        },
    )?;
    out.push(outcome(
        "student reset is exact",
        reset_ok,
        "teacher == student at every reset".into(),
    ));
    out.push(outcome("teacher drift bound", drift_ok, "|dθ'| <= m |θ - θ'|".into()));

    let frozen_ok = {
        let cont = OnlineConfig {
            scheme: UpdateScheme::Continual,
            ..OnlineConfig::default()
        };
        let fin = adapt_online(&model, &xs, &cont, &empty_context())?
            .final_model
            .expect("set by the runner");
        model
            .params()
            .iter()
            .zip(fin.params())
            .filter(|(p, _)| p.group == crate::nn::ParamGroup::Backbone)
            .all(|(p, q)| p.value.data() == q.value.data())
    };
    out.push(outcome("frozen backbone untouched", frozen_ok, "continual run".into()));

    let bad = topk_disagreements(1000, 3)?;
    out.push(outcome(
        "top-k vs rank oracle",
        bad == 0,
        format!("{bad} of 1000 matrices differ"),
    ));

    let bad = metric_disagreements(200, 4)?;
    out.push(outcome(
        "dice and hd95 vs brute force",
        bad == 0,
        format!("{bad} of 200 pairs differ"),
    ));

    let mut spec = default_benchmark(5).source;
    spec.train = 2;
    spec.test = 2;
    let same = generate_domain(&spec)? == generate_domain(&spec)?;
    out.push(outcome(
        "generation is deterministic",
        same,
        "two runs of one spec".into(),
    ));

    Ok(out)
}
