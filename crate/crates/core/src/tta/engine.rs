use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{adaptation_loss, LossContext, LossKind};
use super::momentum::{blend, ema_update, MomentumSchedule, DEFAULT_FLOOR, DEFAULT_M0};
use super::report::{AdaptReport, SampleRecord};
use crate::bench::Mask;
use crate::error::{Error, Result};
use crate::nn::{select_trainable, AdamState, Ctx, Mode, Module, NormLayer, SegModel, TrainPolicy};
use crate::prompts::PassModel;
use crate::tensor::Tensor;

/// Adam step size used by every adaptation method unless configured.
pub const DEFAULT_LR: f64 = 0.002;

/// How the student is initialized for each arriving sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateScheme {
    /// Reset from an EMA teacher with decaying momentum.
    Amu,
    /// Reset from the initial model every time.
    Independent,
    /// Carry the previous sample's parameters forward.
    Continual,
}

impl fmt::Display for UpdateScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpdateScheme::Amu => "amu",
            UpdateScheme::Independent => "independent",
            UpdateScheme::Continual => "continual",
        })
    }
}

impl FromStr for UpdateScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "amu" => Ok(Self::Amu),
            "independent" => Ok(Self::Independent),
            "continual" => Ok(Self::Continual),
            _ => Err(Error::InvalidConfig(format!("unknown update scheme {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnlineConfig {
    pub loss: LossKind,
    pub lr: f64,
    pub steps_per_sample: usize,
    pub scheme: UpdateScheme,
    pub m0: f64,
    pub omega: f64,
    pub c: f64,
    pub policy: TrainPolicy,
    /// Let tracked BN layers update their running statistics while adapting.
    pub update_running_stats: bool,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Tent,
            lr: DEFAULT_LR,
            steps_per_sample: 1,
            scheme: UpdateScheme::Amu,
            m0: DEFAULT_M0,
            omega: 0.94,
            c: DEFAULT_FLOOR,
            policy: TrainPolicy::ADAPT,
            update_running_stats: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfflineConfig {
    pub loss: LossKind,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub policy: TrainPolicy,
    pub update_running_stats: bool,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Tent,
            lr: DEFAULT_LR,
            epochs: 5,
            batch_size: 4,
            seed: 0,
            policy: TrainPolicy::ADAPT,
            update_running_stats: false,
        }
    }
}

/// Points in the online loop an observer may inspect.
pub enum OnlineEvent<'a> {
    /// The student has just been initialized for sample `index`.
    Reset {
        index: usize,
        teacher: &'a PassModel,
        student: &'a PassModel,
    },
    /// The teacher has absorbed the adapted student.
    TeacherUpdated {
        index: usize,
        previous: &'a PassModel,
        student: &'a PassModel,
        teacher: &'a PassModel,
        momentum: f64,
    },
}

/// What an update step optimizes and which state it may touch.
#[derive(Clone, Copy)]
struct StepSpec {
    loss: LossKind,
    policy: TrainPolicy,
    update_running_stats: bool,
}

/// One forward/backward/update on `x`, returning the loss before the update.
fn adapt_step(
    model: &mut PassModel,
    x: &Tensor,
    spec: StepSpec,
    lc: &LossContext,
    selected: &[String],
    adam: &mut AdamState,
) -> Result<f64> {
    let StepSpec {
        loss,
        policy,
        update_running_stats,
    } = spec;
    let mode = if update_running_stats { Mode::Train } else { Mode::Eval };
    let mut ctx = Ctx::new(mode, policy);
    if loss == LossKind::BnStat {
        ctx = ctx.with_stats();
    }
    let xv = ctx.input(x);
    let logits = model.forward(&mut ctx, xv)?;
    let l = adaptation_loss(&mut ctx, loss, logits, lc)?;
    let value = ctx.graph.data(l)[0];
    ctx.backward(l)?;
    model.accumulate_grads(&ctx.graph);
    fill_unreached(model, selected);
    adam.step(model, selected)?;
    model.zero_grad();
    model.apply_running_updates(&ctx.running_updates, update_running_stats);
    Ok(value)
}

/// Selected parameters the loss never reached get an explicit zero gradient.
fn fill_unreached<M: Module>(model: &mut M, selected: &[String]) {
    model.visit_params_mut(&mut |p| {
        if p.value.grad.is_none() && selected.contains(&p.name) {
            p.value.grad = Some(vec![0.0; p.value.numel()]);
        }
    });
}

fn ema_norm(t: &mut NormLayer, s: &NormLayer, m: f64) {
    for (a, &b) in t.running_mean.iter_mut().zip(&s.running_mean) {
        *a = blend(*a, b, m);
    }
    for (a, &b) in t.running_var.iter_mut().zip(&s.running_var) {
        *a = blend(*a, b, m);
    }
}

/// Running statistics follow the same EMA as the parameters.
fn ema_running_stats(teacher: &mut PassModel, student: &PassModel, m: f64) {
    for (t, s) in teacher.backbone.norms_mut().zip(student.backbone.norms()) {
        ema_norm(t, s, m);
    }
    if let (Some(t), Some(s)) = (&mut teacher.prompts.decorator, &student.prompts.decorator) {
        ema_norm(&mut t.norm, &s.norm, m);
    }
}

fn masks_of(logits: &Tensor) -> Result<Vec<Vec<Mask>>> {
    Mask::from_logits(logits)
}

/// Sequential adaptation over `stream`, one item (a `[B, C, H, W]` batch) at
/// a time, predicting each item with the adapted student.
pub fn adapt_online(
    initial: &PassModel,
    stream: &[Tensor],
    cfg: &OnlineConfig,
    lc: &LossContext,
) -> Result<AdaptReport> {
    adapt_online_observed(initial, stream, cfg, lc, &mut |_| {})
}

pub fn adapt_online_observed(
    initial: &PassModel,
    stream: &[Tensor],
    cfg: &OnlineConfig,
    lc: &LossContext,
    observer: &mut dyn FnMut(&OnlineEvent),
) -> Result<AdaptReport> {
    if stream.is_empty() {
        return Err(Error::EmptyStream);
    }
    if cfg.lr.is_nan() || cfg.lr <= 0.0 {
        return Err(Error::InvalidConfig("learning rate must be positive".into()));
    }
    let mut sched = MomentumSchedule::new(cfg.m0, cfg.omega, cfg.c)?;
    let spec = StepSpec {
        loss: cfg.loss,
        policy: cfg.policy,
        update_running_stats: cfg.update_running_stats,
    };
    let selected = select_trainable(initial, cfg.policy);
    let mut teacher = initial.clone();
    let mut student = initial.clone();
    let mut records = Vec::with_capacity(stream.len());
    for (index, x) in stream.iter().enumerate() {
        match cfg.scheme {
            UpdateScheme::Amu => student.clone_from(&teacher),
            UpdateScheme::Independent => student.clone_from(initial),
            UpdateScheme::Continual => {}
        }
        observer(&OnlineEvent::Reset {
            index,
            teacher: &teacher,
            student: &student,
        });
        let mut adam = AdamState::new(cfg.lr);
        let mut losses = Vec::with_capacity(cfg.steps_per_sample);
        let mut step_millis = Vec::with_capacity(cfg.steps_per_sample);
        for _ in 0..cfg.steps_per_sample {
            let t0 = Instant::now();
            losses.push(adapt_step(&mut student, x, spec, lc, &selected, &mut adam)?);
            step_millis.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        let prediction = masks_of(&student.predict(x)?)?;
        let momentum = if cfg.scheme == UpdateScheme::Amu {
            let m = sched.current;
            let previous = teacher.clone();
            ema_update(&mut teacher, &student, m, cfg.policy)?;
            ema_running_stats(&mut teacher, &student, m);
            observer(&OnlineEvent::TeacherUpdated {
                index,
                previous: &previous,
                student: &student,
                teacher: &teacher,
                momentum: m,
            });
            sched.step();
            Some(m)
        } else {
            None
        };
        records.push(SampleRecord {
            index,
            losses,
            momentum,
            step_millis,
            prediction,
        });
    }
    let final_model = match cfg.scheme {
        UpdateScheme::Amu => teacher,
        UpdateScheme::Independent => initial.clone(),
        UpdateScheme::Continual => student,
    };
    Ok(AdaptReport {
        records,
        step_losses: Vec::new(),
        final_model: Some(final_model),
    })
}

/// Epoch training on the whole unlabelled set, then prediction of every item.
pub fn adapt_offline(
    initial: &PassModel,
    data: &[Tensor],
    cfg: &OfflineConfig,
    lc: &LossContext,
) -> Result<AdaptReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 || cfg.lr.is_nan() || cfg.lr <= 0.0 {
        return Err(Error::InvalidConfig(
            "offline adaptation needs a positive batch size and learning rate".into(),
        ));
    }
    let mut model = initial.clone();
    let spec = StepSpec {
        loss: cfg.loss,
        policy: cfg.policy,
        update_running_stats: cfg.update_running_stats,
    };
    let selected = select_trainable(&model, cfg.policy);
    let mut adam = AdamState::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step_losses = Vec::new();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<&Tensor> = chunk.iter().map(|&i| &data[i]).collect();
            let x = Tensor::stack_batch(&items)?;
            step_losses.push(adapt_step(&mut model, &x, spec, lc, &selected, &mut adam)?);
        }
    }
    let records = data
        .iter()
        .enumerate()
        .map(|(index, x)| {
            Ok(SampleRecord {
                index,
                losses: Vec::new(),
                momentum: None,
                step_millis: Vec::new(),
                prediction: masks_of(&model.predict(x)?)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AdaptReport {
        records,
        step_losses,
        final_model: Some(model),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    SourceOnly,
    Ptbn,
    Tent,
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Baseline::SourceOnly => "source_only",
            Baseline::Ptbn => "ptbn",
            Baseline::Tent => "tent",
        })
    }
}

impl FromStr for Baseline {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source_only" => Ok(Self::SourceOnly),
            "ptbn" => Ok(Self::Ptbn),
            "tent" => Ok(Self::Tent),
            _ => Err(Error::InvalidConfig(format!("unknown baseline {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    /// Learning rate of the entropy baseline.
    pub lr: f64,
    pub steps_per_sample: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            steps_per_sample: 1,
        }
    }
}

fn predict_with_mode(model: &SegModel, x: &Tensor, mode: Mode) -> Result<Tensor> {
    let mut ctx = Ctx::new(mode, TrainPolicy::FROZEN);
    let v = ctx.input(x);
    let y = model.forward(&mut ctx, v, None)?;
    Ok(ctx.graph.value(y).clone())
}

/// Comparison methods on the bare backbone. The entropy baseline normalizes
/// with the current batch's statistics, updates norm affine parameters only,
/// and keeps both parameters and optimizer state across the stream.
pub fn baseline_adapt(
    kind: Baseline,
    backbone: &SegModel,
    stream: &[Tensor],
    cfg: &BaselineConfig,
) -> Result<AdaptReport> {
    if stream.is_empty() {
        return Err(Error::EmptyStream);
    }
    let mut model = backbone.clone();
    let selected = select_trainable(&model, TrainPolicy::NORM_ONLY);
    let mut adam = AdamState::new(cfg.lr);
    let mut records = Vec::with_capacity(stream.len());
    for (index, x) in stream.iter().enumerate() {
        let mut losses = Vec::new();
        let mut step_millis = Vec::new();
        let logits = match kind {
            Baseline::SourceOnly => predict_with_mode(&model, x, Mode::Eval)?,
            Baseline::Ptbn => predict_with_mode(&model, x, Mode::BatchStats)?,
            Baseline::Tent => {
                for _ in 0..cfg.steps_per_sample {
                    let t0 = Instant::now();
                    let mut ctx = Ctx::new(Mode::BatchStats, TrainPolicy::NORM_ONLY);
                    let xv = ctx.input(x);
                    let y = model.forward(&mut ctx, xv, None)?;
                    let l = super::losses::loss_tent(&mut ctx.graph, y);
                    losses.push(ctx.graph.data(l)[0]);
                    ctx.backward(l)?;
                    model.accumulate_grads(&ctx.graph);
                    adam.step(&mut model, &selected)?;
                    model.zero_grad();
                    step_millis.push(t0.elapsed().as_secs_f64() * 1e3);
                }
                predict_with_mode(&model, x, Mode::BatchStats)?
            }
        };
        records.push(SampleRecord {
            index,
            losses,
            momentum: None,
            step_millis,
            prediction: masks_of(&logits)?,
        });
    }
    Ok(AdaptReport {
        records,
        step_losses: Vec::new(),
        final_model: Some(PassModel::source_only(model)),
    })
}
