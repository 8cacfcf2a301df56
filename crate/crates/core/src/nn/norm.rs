use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::param::{Ctx, LayerStats, Mode, Param, ParamGroup, RunningUpdate};
use crate::error::{Error, Result};
use crate::tensor::{PlaneGroups, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    Instance,
    Batch,
    /// Batch normalization that never tracks running statistics.
    BatchUntracked,
    Layer,
    Group(usize),
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NormKind::Instance => write!(f, "IN"),
            NormKind::Batch => write!(f, "BN"),
            NormKind::BatchUntracked => write!(f, "BN*"),
            NormKind::Layer => write!(f, "LN"),
            NormKind::Group(g) => write!(f, "GN{g}"),
        }
    }
}

impl FromStr for NormKind {
    type Err = Error;

    /// `IN`, `BN`, `BN*`, `LN`, `GN` (4 groups) or `GN<n>`.
    fn from_str(s: &str) -> Result<Self> {
        let up = s.trim().to_ascii_uppercase();
        Ok(match up.as_str() {
            "IN" => NormKind::Instance,
            "BN" => NormKind::Batch,
            "BN*" => NormKind::BatchUntracked,
            "LN" => NormKind::Layer,
            "GN" => NormKind::Group(4),
            _ => match up.strip_prefix("GN").and_then(|n| n.parse().ok()) {
                Some(n) if n > 0 => NormKind::Group(n),
                _ => return Err(Error::InvalidConfig(format!("unknown norm kind {s:?}"))),
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormLayer {
    pub name: String,
    pub kind: NormKind,
    pub num_features: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl NormLayer {
    pub fn new(name: &str, kind: NormKind, num_features: usize, group: ParamGroup) -> Result<Self> {
        if let NormKind::Group(g) = kind {
            if g == 0 || !num_features.is_multiple_of(g) {
                return Err(Error::InvalidGroups {
                    groups: g,
                    cin: num_features,
                    cout: num_features,
                });
            }
        }
        Ok(Self {
            name: name.to_string(),
            kind,
            num_features,
            gamma: Param::new(format!("{name}.gamma"), group, Tensor::full(&[num_features], 1.0)),
            beta: Param::new(format!("{name}.beta"), group, Tensor::zeros(&[num_features])),
            running_mean: vec![0.0; num_features],
            running_var: vec![1.0; num_features],
            momentum: BN_MOMENTUM,
            eps: NORM_EPS,
        })
    }

    pub fn tracks_running_stats(&self) -> bool {
        self.kind == NormKind::Batch
    }

    fn groups(&self, shape: &[usize]) -> Result<PlaneGroups> {
        Ok(match self.kind {
            NormKind::Instance => PlaneGroups::per_instance(shape),
            NormKind::Batch | NormKind::BatchUntracked => PlaneGroups::per_channel(shape),
            NormKind::Layer => PlaneGroups::per_sample(shape),
            NormKind::Group(g) => PlaneGroups::per_sample_group(shape, g)?,
        })
    }

    /// Normalizes `x` (`[B, C, H, W]`) and applies the affine transform.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.graph.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.num_features {
            return Err(Error::shape("norm", &shape, &[self.num_features]));
        }
        let groups = Rc::new(self.groups(&shape)?);
        let tracked = self.tracks_running_stats();
        let use_running = tracked && ctx.mode == Mode::Eval;
        let g = &mut ctx.graph;
        let batch_stats = if !use_running || (tracked && ctx.collect_stats) {
            Some((g.group_mean(x, &groups)?, g.group_var(x, &groups)?))
        } else {
            None
        };
        let (mean, var) = match batch_stats {
            Some(stats) if !use_running => stats,
            _ => {
                let m = g.constant(Tensor::new(&[self.num_features], self.running_mean.clone())?);
                let v = g.constant(Tensor::new(&[self.num_features], self.running_var.clone())?);
                (m, v)
            }
        };
        if tracked {
            if let Some((bm, bv)) = batch_stats {
                if ctx.collect_stats {
                    ctx.stats.push(LayerStats {
                        layer: self.name.clone(),
                        mean: bm,
                        var: bv,
                    });
                }
                if ctx.mode == Mode::Train {
                    let n = (shape[0] * shape[2] * shape[3]) as f64;
                    let correction = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                    ctx.running_updates.push(RunningUpdate {
                        layer: self.name.clone(),
                        mean: ctx.graph.data(bm).to_vec(),
                        var_unbiased: ctx.graph.data(bv).iter().map(|v| v * correction).collect(),
                    });
                }
            }
        }
        let g = &mut ctx.graph;
        let normed = g.normalize(x, mean, var, self.eps, &groups)?;
        let gamma = ctx.bind(&self.gamma);
        let beta = ctx.bind(&self.beta);
        ctx.graph.channel_affine(normed, gamma, beta)
    }

    pub fn apply_running_update(&mut self, upd: &RunningUpdate) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(&upd.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&upd.var_unbiased) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param::TrainPolicy;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(layer: &NormLayer, x: &Tensor, mode: Mode) -> (Vec<f64>, Vec<RunningUpdate>) {
        let mut ctx = Ctx::new(mode, TrainPolicy::FROZEN);
        let v = ctx.input(x);
        let y = layer.forward(&mut ctx, v).unwrap();
        (ctx.graph.data(y).to_vec(), ctx.running_updates)
    }

    fn input(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape, -3.0, 5.0, &mut rng)
    }

    #[test]
    fn parse_kinds() {
        assert_eq!("bn*".parse::<NormKind>().unwrap(), NormKind::BatchUntracked);
        assert_eq!("GN8".parse::<NormKind>().unwrap(), NormKind::Group(8));
        assert!("XN".parse::<NormKind>().is_err());
    }

    #[test]
    fn instance_norm_of_constant_channel_is_zero() {
        let layer = NormLayer::new("n", NormKind::Instance, 2, ParamGroup::NormAffine).unwrap();
        let x = Tensor::full(&[1, 2, 3, 3], 4.2);
        let (y, _) = run(&layer, &x, Mode::Train);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn untracked_bn_with_single_sample_matches_instance_norm() {
        let x = input(&[1, 3, 4, 4], 1);
        let bn = NormLayer::new("n", NormKind::BatchUntracked, 3, ParamGroup::NormAffine).unwrap();
        let inorm = NormLayer::new("n", NormKind::Instance, 3, ParamGroup::NormAffine).unwrap();
        let (a, upd) = run(&bn, &x, Mode::Eval);
        let (b, _) = run(&inorm, &x, Mode::Eval);
        assert!(upd.is_empty());
        // oracle: direct per-channel standardization
        let d = x.data();
        for c in 0..3 {
            let ch = &d[c * 16..(c + 1) * 16];
            let m = ch.iter().sum::<f64>() / 16.0;
            let v = ch.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 16.0;
            for i in 0..16 {
                let want = (ch[i] - m) / (v + NORM_EPS).sqrt();
                assert!((a[c * 16 + i] - want).abs() < 1e-12);
                assert!((b[c * 16 + i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn group_norm_limits() {
        let x = input(&[2, 4, 3, 3], 2);
        let make = |k| NormLayer::new("n", k, 4, ParamGroup::NormAffine).unwrap();
        let (gn_c, _) = run(&make(NormKind::Group(4)), &x, Mode::Train);
        let (inn, _) = run(&make(NormKind::Instance), &x, Mode::Train);
        let (gn_1, _) = run(&make(NormKind::Group(1)), &x, Mode::Train);
        let (ln, _) = run(&make(NormKind::Layer), &x, Mode::Train);
        for (a, b) in gn_c.iter().zip(&inn).chain(gn_1.iter().zip(&ln)) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(NormLayer::new("n", NormKind::Group(3), 4, ParamGroup::NormAffine).is_err());
    }

    #[test]
    fn normalized_groups_have_zero_mean_unit_variance() {
        let x = input(&[3, 4, 5, 5], 3);
        for kind in [
            NormKind::Instance,
            NormKind::Batch,
            NormKind::BatchUntracked,
            NormKind::Layer,
            NormKind::Group(2),
        ] {
            let layer = NormLayer::new("n", kind, 4, ParamGroup::NormAffine).unwrap();
            let (y, _) = run(&layer, &x, Mode::Train);
            let groups = layer.groups(x.shape()).unwrap();
            let mut sums = vec![(0.0, 0.0, 0usize); groups.groups()];
            for (p, chunk) in y.chunks(25).enumerate() {
                let gidx = match kind {
                    NormKind::Instance => p,
                    NormKind::Batch | NormKind::BatchUntracked => p % 4,
                    NormKind::Layer => p / 4,
                    NormKind::Group(_) => (p / 4) * 2 + (p % 4) / 2,
                };
                for &v in chunk {
                    sums[gidx].0 += v;
                    sums[gidx].1 += v * v;
                    sums[gidx].2 += 1;
                }
            }
            for (s, s2, n) in sums {
                let m = s / n as f64;
                let var = s2 / n as f64 - m * m;
                assert!(m.abs() < 1e-6, "{kind}: mean {m}");
                assert!((var - 1.0).abs() < 1e-4, "{kind}: var {var}");
            }
        }
    }

    #[test]
    fn batch_norm_modes() {
        let x = input(&[4, 2, 3, 3], 4);
        let mut bn = NormLayer::new("bn", NormKind::Batch, 2, ParamGroup::NormAffine).unwrap();
        let (_, upd) = run(&bn, &x, Mode::Train);
        assert_eq!(upd.len(), 1);
        bn.apply_running_update(&upd[0]);
        assert!(bn.running_var.iter().all(|&v| v > 0.0));
        assert!(bn.running_mean.iter().any(|&v| v != 0.0));

        let (e1, upd) = run(&bn, &x, Mode::Eval);
        let (e2, _) = run(&bn, &x, Mode::Eval);
        assert!(upd.is_empty());
        assert_eq!(e1, e2);

        let (p, upd) = run(&bn, &x, Mode::BatchStats);
        assert!(upd.is_empty());
        assert_ne!(p, e1);
    }

    #[test]
    fn shape_check() {
        let layer = NormLayer::new("n", NormKind::Instance, 3, ParamGroup::NormAffine).unwrap();
        let mut ctx = Ctx::eval();
        let v = ctx.input(&Tensor::zeros(&[1, 2, 2, 2]));
        assert!(layer.forward(&mut ctx, v).is_err());
    }
}
