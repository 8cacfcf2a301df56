use std::collections::{BTreeMap, HashSet};

use super::param::{Module, Param};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One bias-corrected Adam update of the parameters named in `selected`.
    /// Their gradients are consumed. Parameters outside the selection are left untouched.
    pub fn step<M: Module + ?Sized>(&mut self, model: &mut M, selected: &[String]) -> Result<()> {
        let wanted: HashSet<&str> = selected.iter().map(String::as_str).collect();
        let mut missing = None;
        model.visit_params_mut(&mut |p| {
            if wanted.contains(p.name.as_str()) && p.value.grad.is_none() && missing.is_none() {
                missing = Some(p.name.clone());
            }
        });
        if let Some(name) = missing {
            return Err(Error::MissingGrad(name));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let moments = &mut self.moments;
        model.visit_params_mut(&mut |p: &mut Param| {
            if !wanted.contains(p.name.as_str()) {
                return;
            }
            let n = p.value.numel();
            let (m, v) = moments
                .entry(p.name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let grad = p.value.grad.take().expect("checked above");
            let data = p.value.data_mut();
            for i in 0..n {
                m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= lr * mh / (vh.sqrt() + eps);
            }
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param::ParamGroup;
    use crate::tensor::Tensor;

    struct One(Param);

    impl Module for One {
        fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
            f(&self.0)
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
            f(&mut self.0)
        }
    }

    fn one(v: f64) -> One {
        One(Param::new("p", ParamGroup::Prompt, Tensor::scalar(v)))
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut m = one(3.0);
        m.0.value.grad = Some(vec![0.0]);
        let mut adam = AdamState::new(0.01);
        adam.step(&mut m, &["p".into()]).unwrap();
        assert_eq!(m.0.value.item(), 3.0);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut m = one(0.0);
        m.0.value.grad = Some(vec![1.0]);
        let mut adam = AdamState::new(0.01);
        adam.step(&mut m, &["p".into()]).unwrap();
        assert!((m.0.value.item() + 0.01).abs() < 1e-9);
    }

    #[test]
    fn sign_flipping_steps_are_bounded_by_lr() {
        // oracle: the Adam recurrence evaluated by hand for g = +1, -1
        let lr = 0.01;
        let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        let mut expected = 0.0;
        let (mut mo, mut vo) = (0.0, 0.0);
        let mut m = one(0.0);
        let mut adam = AdamState::new(lr);
        for (t, g) in [1.0, -1.0].into_iter().enumerate() {
            mo = b1 * mo + (1.0 - b1) * g;
            vo = b2 * vo + (1.0 - b2) * g * g;
            let t = t as i32 + 1;
            let delta = lr * (mo / (1.0 - b1.powi(t))) / ((vo / (1.0 - b2.powi(t))).sqrt() + eps);
            expected -= delta;
            let before = m.0.value.item();
            m.0.value.grad = Some(vec![g]);
            adam.step(&mut m, &["p".into()]).unwrap();
            let moved = m.0.value.item() - before;
            assert!(moved.abs() <= lr + 1e-15);
            assert!((m.0.value.item() - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut m = one(0.0);
        let mut adam = AdamState::new(0.01);
        assert!(matches!(adam.step(&mut m, &["p".into()]), Err(Error::MissingGrad(_))));
        // unselected parameters need no gradient
        adam.step(&mut m, &[]).unwrap();
    }

    #[test]
    fn step_consumes_gradient() {
        let mut m = one(0.0);
        m.0.value.grad = Some(vec![1.0]);
        let mut adam = AdamState::new(0.1);
        adam.step(&mut m, &["p".into()]).unwrap();
        assert!(m.0.value.grad.is_none());
    }
}
