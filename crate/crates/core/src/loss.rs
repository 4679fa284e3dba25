//! Training objective: the mean of binary cross-entropy and smoothed Dice.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub use crate::autograd::CLAMP;

/// `(bce + dice) / 2` over the whole batch.
pub fn combined_loss<T: Element>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    let bce = g.bce_loss(pred, target)?;
    let dice = g.dice_loss(pred, target)?;
    let sum = g.add(bce, dice)?;
    Ok(g.scale(sum, T::from_f64(0.5)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub bce: f64,
    pub dice: f64,
    pub combined: f64,
}

/// Loss values without gradients.
pub fn evaluate_loss(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<LossValues> {
    let mut g = Graph::<f32>::new();
    let p = g.input(pred.clone());
    let bce = g.bce_loss(p, target)?;
    let dice = g.dice_loss(p, target)?;
    let (bce, dice) = (g.value(bce).data()[0] as f64, g.value(dice).data()[0] as f64);
    Ok(LossValues { bce, dice, combined: (bce + dice) / 2.0 })
}

/// Reject masks containing anything other than 0 and 1.
pub fn ensure_binary(mask: &Tensor<f32>) -> Result<()> {
    match mask.data().iter().position(|&v| v != 0.0 && v != 1.0) {
        None => Ok(()),
        Some(i) => Err(Error::Validation(format!("mask value {} at index {i} is not binary", mask.data()[i]))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn t(v: Vec<f32>) -> Tensor<f32> {
        Tensor::from_vec(Shape::new(1, 1, 1, v.len()), v).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let v = evaluate_loss(&t(vec![1.0, 0.0, 1.0]), &t(vec![1.0, 0.0, 1.0])).unwrap();
        assert!(v.bce < 1e-6);
        assert!(v.dice.abs() < 1e-6);
    }

    #[test]
    fn half_prediction_bce_is_ln2() {
        let v = evaluate_loss(&t(vec![0.5; 4]), &t(vec![1.0, 0.0, 1.0, 0.0])).unwrap();
        assert!((v.bce - std::f64::consts::LN_2).abs() < 1e-6);
        // dice: 1 - (2*1 + 1) / (2 + 2 + 1)
        assert!((v.dice - 0.4).abs() < 1e-6);
        assert!((v.combined - (v.bce + v.dice) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn clamped_bce_stays_finite() {
        let v = evaluate_loss(&t(vec![0.0, 1.0]), &t(vec![1.0, 0.0])).unwrap();
        assert!(v.bce.is_finite());
        assert!((v.bce - -(1e-7f64).ln()).abs() < 1e-3);
    }

    #[test]
    fn binary_check() {
        assert!(ensure_binary(&t(vec![0.0, 1.0])).is_ok());
        assert!(ensure_binary(&t(vec![0.0, 0.5])).is_err());
    }
}
