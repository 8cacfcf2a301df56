use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Module, TrainPolicy};

pub const DEFAULT_M0: f64 = 0.1;
pub const DEFAULT_FLOOR: f64 = 0.005;

/// Decaying EMA momentum: `m_{i+1} = c + m_i * omega`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentumSchedule {
    pub m0: f64,
    pub omega: f64,
    pub c: f64,
    pub current: f64,
    pub step: u64,
}

impl MomentumSchedule {
    pub fn new(m0: f64, omega: f64, c: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&omega) {
            return Err(Error::InvalidConfig(format!("decay factor {omega} outside [0, 1]")));
        }
        if !(0.0..=1.0).contains(&m0) || !(0.0..=1.0).contains(&c) {
            return Err(Error::InvalidConfig("momentum values must lie in [0, 1]".into()));
        }
        Ok(Self {
            m0,
            omega,
            c,
            current: m0,
            step: 0,
        })
    }

    pub fn with_decay(omega: f64) -> Result<Self> {
        Self::new(DEFAULT_M0, omega, DEFAULT_FLOOR)
    }

    /// Advances to `m_{i+1}` and returns it.
    pub fn step(&mut self) -> f64 {
        self.current = self.c + self.current * self.omega;
        self.step += 1;
        self.current
    }

    /// Fixed point `c / (1 - omega)`; infinite for `omega == 1`.
    pub fn fixed_point(&self) -> f64 {
        self.c / (1.0 - self.omega)
    }
}

/// `(1 - m) t + m s`, written so that `t == s` and `m == 1` are exact.
pub(crate) fn blend(t: f64, s: f64, m: f64) -> f64 {
    if m == 1.0 {
        s
    } else {
        t + m * (s - t)
    }
}

/// `teacher <- (1 - m) * teacher + m * student` on every parameter the
/// policy marks adaptable. Other parameters are left alone.
pub fn ema_update<M: Module>(teacher: &mut M, student: &M, m: f64, policy: TrainPolicy) -> Result<()> {
    let src = student.params();
    let mut idx = 0;
    let mut err = None;
    teacher.visit_params_mut(&mut |p| {
        if err.is_some() {
            return;
        }
        let Some(s) = src.get(idx) else {
            err = Some(Error::StructureMismatch(format!("student lacks {}", p.name)));
            return;
        };
        idx += 1;
        if s.name != p.name || s.value.shape() != p.value.shape() {
            err = Some(Error::StructureMismatch(format!("{} vs {}", p.name, s.name)));
            return;
        }
        if !policy.allows(p.group) {
            return;
        }
        for (t, &v) in p.value.data_mut().iter_mut().zip(s.value.data()) {
            *t = blend(*t, v, m);
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if idx != src.len() {
        return Err(Error::StructureMismatch("student has extra parameters".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Param, ParamGroup};
    use crate::tensor::Tensor;

    #[derive(Clone)]
    struct Pair(Vec<Param>);

    impl Module for Pair {
        fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
            self.0.iter().for_each(f)
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
            self.0.iter_mut().for_each(f)
        }
    }

    fn pair(prompt: f64, frozen: f64) -> Pair {
        Pair(vec![
            Param::new("phi", ParamGroup::Prompt, Tensor::scalar(prompt)),
            Param::new("psi", ParamGroup::Backbone, Tensor::scalar(frozen)),
        ])
    }

    #[test]
    fn first_decay_step() {
        let mut s = MomentumSchedule::with_decay(0.94).unwrap();
        assert!((s.step() - 0.099).abs() < 1e-15);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn fixed_points() {
        let s = MomentumSchedule::with_decay(0.94).unwrap();
        assert!((s.fixed_point() - 0.005 / 0.06).abs() < 1e-15);
        let s = MomentumSchedule::with_decay(0.6).unwrap();
        assert!((s.fixed_point() - 0.0125).abs() < 1e-15);
        let mut s = MomentumSchedule::new(0.7, 0.0, 0.005).unwrap();
        assert_eq!(s.step(), 0.005);
    }

    #[test]
    fn rejects_bad_decay() {
        assert!(MomentumSchedule::with_decay(1.5).is_err());
        assert!(MomentumSchedule::with_decay(-0.1).is_err());
    }

    #[test]
    fn ema_cases() {
        let student = pair(10.0, 5.0);
        let mut t = pair(0.0, 1.0);
        ema_update(&mut t, &student, 0.1, TrainPolicy::ADAPT).unwrap();
        assert!((t.0[0].value.item() - 1.0).abs() < 1e-15);
        assert_eq!(t.0[1].value.item(), 1.0);

        let mut t = pair(3.0, 1.0);
        ema_update(&mut t, &student, 0.0, TrainPolicy::ADAPT).unwrap();
        assert_eq!(t.0[0].value.item(), 3.0);
        ema_update(&mut t, &student, 1.0, TrainPolicy::ADAPT).unwrap();
        assert_eq!(t.0[0].value.item(), 10.0);
    }

    #[test]
    fn ema_structure_mismatch() {
        let student = Pair(vec![Param::new("other", ParamGroup::Prompt, Tensor::scalar(1.0))]);
        let mut t = pair(0.0, 0.0);
        assert!(matches!(
            ema_update(&mut t, &student, 0.5, TrainPolicy::ADAPT),
            Err(Error::StructureMismatch(_))
        ));
    }
}
