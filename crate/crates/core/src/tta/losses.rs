use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Ctx, LayerStats};
use crate::tensor::{Graph, PlaneGroups, Tensor, Var};

pub use crate::nn::SourceStats;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Tent,
    #[serde(rename = "bnstat")]
    BnStat,
    ClassRatio,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Tent => "tent",
            LossKind::BnStat => "bnstat",
            LossKind::ClassRatio => "class_ratio",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tent" => Ok(LossKind::Tent),
            "bnstat" | "bn" => Ok(LossKind::BnStat),
            "class_ratio" => Ok(LossKind::ClassRatio),
            _ => Err(Error::InvalidConfig(format!("unknown loss {s:?}"))),
        }
    }
}

/// Everything a test-time loss may consult besides the logits.
#[derive(Clone, Debug, Default)]
pub struct LossContext {
    pub source_stats: SourceStats,
    pub class_priors: Vec<f64>,
}

/// Mean binary entropy of `sigmoid(logits)` over every pixel and class.
pub fn loss_tent(g: &mut Graph, logits: Var) -> Var {
    let h = g.binary_entropy_logits(logits);
    g.mean(h)
}

/// `sum_l |mu_t - mu_s|^2 + |var_t - var_s|^2`, divided by the total number
/// of features across the matched layers.
pub fn loss_bnstat(g: &mut Graph, target: &[LayerStats], source: &SourceStats) -> Result<Var> {
    if source.is_empty() {
        return Err(Error::MissingStats);
    }
    let mut total: Option<Var> = None;
    let mut features = 0usize;
    for (layer, mean_s, var_s) in source {
        let t = target.iter().find(|s| &s.layer == layer).ok_or(Error::MissingStats)?;
        if g.shape(t.mean) != [mean_s.len()] || var_s.len() != mean_s.len() {
            return Err(Error::shape("bnstat", g.shape(t.mean), &[mean_s.len()]));
        }
        features += mean_s.len();
        let ms = g.constant(Tensor::new(&[mean_s.len()], mean_s.clone())?);
        let vs = g.constant(Tensor::new(&[var_s.len()], var_s.clone())?);
        let dm = g.sub(t.mean, ms)?;
        let dv = g.sub(t.var, vs)?;
        let dm = g.square(dm);
        let dv = g.square(dv);
        let sm = g.sum(dm);
        let sv = g.sum(dv);
        let layer_loss = g.add(sm, sv)?;
        total = Some(match total {
            Some(acc) => g.add(acc, layer_loss)?,
            None => layer_loss,
        });
    }
    let total = total.expect("non-empty source");
    Ok(g.mul_scalar(total, 1.0 / features as f64))
}

const RATIO_EPS: f64 = 1e-12;

/// `sum_k KL(Bernoulli(rho_k) || Bernoulli(tau_k))` where `rho_k` is the
/// spatial mean of `sigmoid(logits)` for class `k`.
pub fn loss_class_ratio(g: &mut Graph, logits: Var, priors: &[f64]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 4 || shape[1] != priors.len() {
        return Err(Error::shape("class_ratio", &shape, &[priors.len()]));
    }
    if let Some(&bad) = priors.iter().find(|&&t| !(t > 0.0 && t < 1.0)) {
        return Err(Error::InvalidPrior(bad));
    }
    let k = priors.len();
    let groups = Rc::new(PlaneGroups::per_channel(&shape));
    let p = g.sigmoid(logits);
    let rho = g.group_mean(p, &groups)?;
    let rho = g.mul_scalar(rho, 1.0 - 2.0 * RATIO_EPS);
    let rho = g.add_scalar(rho, RATIO_EPS);
    let one_minus = g.mul_scalar(rho, -1.0);
    let one_minus = g.add_scalar(one_minus, 1.0);
    let log_tau = g.constant(Tensor::new(&[k], priors.iter().map(|t| t.ln()).collect())?);
    let log_tau_c = g.constant(Tensor::new(&[k], priors.iter().map(|t| (1.0 - t).ln()).collect())?);
    let lr = g.log(rho);
    let lr = g.sub(lr, log_tau)?;
    let a = g.mul(rho, lr)?;
    let lc = g.log(one_minus);
    let lc = g.sub(lc, log_tau_c)?;
    let b = g.mul(one_minus, lc)?;
    let kl = g.add(a, b)?;
    Ok(g.sum(kl))
}

/// Builds the configured loss for one forward pass. `ctx` must have been
/// created with statistic collection when `kind` is [`LossKind::BnStat`].
pub fn adaptation_loss(ctx: &mut Ctx, kind: LossKind, logits: Var, lc: &LossContext) -> Result<Var> {
    match kind {
        LossKind::Tent => Ok(loss_tent(&mut ctx.graph, logits)),
        LossKind::BnStat => loss_bnstat(&mut ctx.graph, &ctx.stats, &lc.source_stats),
        LossKind::ClassRatio => loss_class_ratio(&mut ctx.graph, logits, &lc.class_priors),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn h(p: f64) -> f64 {
        -p * p.ln() - (1.0 - p) * (1.0 - p).ln()
    }

    #[test]
    fn tent_values() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let l = loss_tent(&mut g, z);
        assert!((g.data(l)[0] - std::f64::consts::LN_2).abs() < 1e-12);

        let sat = g.constant(Tensor::full(&[1, 1, 2, 2], 60.0));
        let l = loss_tent(&mut g, sat);
        assert!(g.data(l)[0] < 1e-20);

        // p = [0.9, 0.5] via logit(0.9)
        let logit = (0.9f64 / 0.1).ln();
        let x = g.constant(Tensor::new(&[1, 2, 1, 1], vec![logit, 0.0]).unwrap());
        let l = loss_tent(&mut g, x);
        let want = (h(0.9) + h(0.5)) / 2.0;
        assert!((g.data(l)[0] - want).abs() < 1e-12);
        assert!((want - 0.5091).abs() < 1e-4);
    }

    #[test]
    fn bnstat_values() {
        let mut g = Graph::new();
        let m = g.constant(Tensor::from_vec(vec![1.0]));
        let v = g.constant(Tensor::from_vec(vec![1.0]));
        let target = vec![LayerStats {
            layer: "l".into(),
            mean: m,
            var: v,
        }];
        let source = vec![("l".to_string(), vec![0.0], vec![1.0])];
        let l = loss_bnstat(&mut g, &target, &source).unwrap();
        assert_eq!(g.data(l)[0], 1.0);

        let aligned = vec![("l".to_string(), vec![1.0], vec![1.0])];
        let l = loss_bnstat(&mut g, &target, &aligned).unwrap();
        assert_eq!(g.data(l)[0], 0.0);

        assert!(matches!(
            loss_bnstat(&mut g, &target, &vec![]),
            Err(Error::MissingStats)
        ));
        let other = vec![("x".to_string(), vec![0.0], vec![1.0])];
        assert!(matches!(loss_bnstat(&mut g, &target, &other), Err(Error::MissingStats)));
    }

    #[test]
    fn class_ratio_values() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let l = loss_class_ratio(&mut g, z, &[0.5]).unwrap();
        assert!(g.data(l)[0].abs() < 1e-10);
        let l = loss_class_ratio(&mut g, z, &[0.25]).unwrap();
        let want = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        assert!((g.data(l)[0] - want).abs() < 1e-10);
        assert!((want - 0.1438).abs() < 1e-4);
        for bad in [0.0, 1.0, -0.2] {
            assert!(matches!(
                loss_class_ratio(&mut g, z, &[bad]),
                Err(Error::InvalidPrior(_))
            ));
        }
    }

    #[test]
    fn parse_loss_kind() {
        assert_eq!("bnstat".parse::<LossKind>().unwrap(), LossKind::BnStat);
        assert_eq!(LossKind::ClassRatio.to_string(), "class_ratio");
        assert!("mse".parse::<LossKind>().is_err());
    }
}
