//! Optimisers and the learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;
/// Per-epoch multiplicative learning-rate decay.
pub const LR_DECAY: f64 = 0.98;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::Validation(format!("unknown optimizer {other:?} (adam|sgd)"))),
        }
    }
}

/// `lr(epoch) = base * 0.98^epoch`.
pub fn scheduled_lr(base: f64, epoch: usize) -> f64 {
    base * LR_DECAY.powi(epoch as i32)
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    base_lr: f64,
    lr: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, store: &ParamStore) -> Result<Self> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::Validation(format!("learning rate {lr} must be finite and >= 0")));
        }
        let zeros = || store.params().iter().map(|p| vec![0.0; p.value.numel()]).collect::<Vec<_>>();
        let (m, v) = match kind {
            OptimizerKind::Adam => (zeros(), zeros()),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Ok(Optimizer { kind, base_lr: lr, lr, step: 0, m, v })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.lr = scheduled_lr(self.base_lr, epoch);
    }

    /// Apply one update. `grads[i]` belongs to parameter `i`; `None` means no
    /// gradient reached it; such parameters are skipped.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor<f32>>]) -> Result<()> {
        if grads.len() != store.params().len() {
            return Err(Error::Validation(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.params().len()
            )));
        }
        self.step += 1;
        let lr = self.lr as f32;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (i, (p, g)) in store.params_mut().iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if g.shape() != p.value.shape() {
                return Err(Error::dim(
                    "optimizer",
                    format!("gradient {:?} for {} {:?}", g.shape(), p.name, p.value.shape()),
                ));
            }
            let w = p.value.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, &g) in w.iter_mut().zip(g.data()) {
                        *w -= lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (((w, &g), m), v) in w.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                        let mh = *m / bc1;
                        let vh = *v / bc2;
                        *w -= lr * mh / (vh.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::Init;
    use crate::tensor::Shape;

    fn store() -> ParamStore {
        let mut s = ParamStore::new(0);
        s.add("w", Shape::new(1, 1, 1, 3), Init::KaimingNormal { fan_in: 3 }).unwrap();
        s
    }

    #[test]
    fn schedule_decays_geometrically() {
        assert_eq!(scheduled_lr(1e-4, 0), 1e-4);
        assert!((scheduled_lr(1.0, 2) - 0.9604).abs() < 1e-12);
    }

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let mut s = store();
        let before = s.params()[0].value.clone();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01, &s).unwrap();
        let g = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![2.0, -0.5, 0.0]).unwrap();
        opt.step(&mut s, &[Some(g)]).unwrap();
        let after = s.params()[0].value.data();
        assert!((before.data()[0] - after[0] - 0.01).abs() < 1e-6);
        assert!((after[1] - before.data()[1] - 0.01).abs() < 1e-6);
        assert_eq!(after[2], before.data()[2]);
    }

    #[test]
    fn zero_lr_and_zero_grad_leave_weights_bitwise() {
        for (lr, gv) in [(0.0, 1.0), (0.1, 0.0)] {
            for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
                let mut s = store();
                let before = s.params()[0].value.clone();
                let mut opt = Optimizer::new(kind, lr, &s).unwrap();
                let g = Tensor::full(Shape::new(1, 1, 1, 3), gv);
                opt.step(&mut s, &[Some(g)]).unwrap();
                assert_eq!(s.params()[0].value, before);
            }
        }
    }

    #[test]
    fn sgd_step() {
        let mut s = store();
        let before = s.params()[0].value.data().to_vec();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.5, &s).unwrap();
        opt.step(&mut s, &[Some(Tensor::full(Shape::new(1, 1, 1, 3), 1.0))]).unwrap();
        for (a, b) in s.params()[0].value.data().iter().zip(before) {
            assert_eq!(*a, b - 0.5);
        }
    }

    #[test]
    fn optimizer_names() {
        assert_eq!("Adam".parse::<OptimizerKind>().unwrap(), OptimizerKind::Adam);
        assert!("rmsprop".parse::<OptimizerKind>().is_err());
    }
}
