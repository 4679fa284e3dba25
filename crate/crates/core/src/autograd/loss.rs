use super::{Grads, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Probabilities are clamped to `[CLAMP, 1 - CLAMP]` inside the BCE log.
pub const CLAMP: f64 = 1e-7;

fn check_target<T: Element>(op: &'static str, graph: &Graph<T>, pred: Var, target: &Tensor<T>) -> Result<()> {
    if graph.shape(pred) != target.shape() {
        return Err(Error::dim(op, format!("pred {:?} vs target {:?}", graph.shape(pred), target.shape())));
    }
    Ok(())
}

pub(super) fn bce_backward<T: Element>(graph: &Graph<T>, pred: Var, target: &[T], g: &Tensor<T>, grads: &mut Grads<T>) {
    let ps = graph.shape(pred);
    let scale = g.data()[0].to_f64() / ps.numel() as f64;
    grads.add(pred, || {
        let d = graph
            .value(pred)
            .data()
            .iter()
            .zip(target)
            .map(|(&p, &y)| {
                let p = p.to_f64();
                if !(CLAMP..=1.0 - CLAMP).contains(&p) {
                    return T::zero();
                }
                let y = y.to_f64();
                T::from_f64(-scale * (y / p - (1.0 - y) / (1.0 - p)))
            })
            .collect();
        Tensor::from_vec(ps, d).expect("bce grad")
    });
}

fn dice_sums<T: Element>(pred: &[T], target: &[T]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut total = 0.0;
    for (&p, &y) in pred.iter().zip(target) {
        let (p, y) = (p.to_f64(), y.to_f64());
        inter += p * y;
        total += p + y;
    }
    (inter, total)
}

pub(super) fn dice_backward<T: Element>(graph: &Graph<T>, pred: Var, target: &[T], g: &Tensor<T>, grads: &mut Grads<T>) {
    let ps = graph.shape(pred);
    let gv = g.data()[0].to_f64();
    grads.add(pred, || {
        let pv = graph.value(pred).data();
        let (inter, total) = dice_sums(pv, target);
        let den = total + 1.0;
        let num = 2.0 * inter + 1.0;
        let d = target
            .iter()
            .map(|&y| T::from_f64(-gv * (2.0 * y.to_f64() * den - num) / (den * den)))
            .collect();
        Tensor::from_vec(ps, d).expect("dice grad")
    });
}

impl<T: Element> Graph<T> {
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::from_f64(v.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean { x }, &[x])
    }

    /// Mean binary cross-entropy of probabilities against a binary target.
    pub fn bce_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        check_target("bce_loss", self, pred, target)?;
        let n = target.numel() as f64;
        let mut acc = 0.0;
        for (&p, &y) in self.value(pred).data().iter().zip(target.data()) {
            let p = p.to_f64().clamp(CLAMP, 1.0 - CLAMP);
            let y = y.to_f64();
            acc += y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        let value = Tensor::scalar(T::from_f64(-acc / n));
        let op = Op::Bce { pred, target: target.data().to_vec() };
        Ok(self.push(value, op, &[pred]))
    }

    /// `1 - (2 sum(p y) + 1) / (sum(p) + sum(y) + 1)`.
    pub fn dice_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        check_target("dice_loss", self, pred, target)?;
        let (inter, total) = dice_sums(self.value(pred).data(), target.data());
        let value = Tensor::scalar(T::from_f64(1.0 - (2.0 * inter + 1.0) / (total + 1.0)));
        let op = Op::Dice { pred, target: target.data().to_vec() };
        Ok(self.push(value, op, &[pred]))
    }
}
