//! Finite-difference verification of reverse-mode gradients.
//!
//! Both routes run in `f64`: the analytic gradient from [`Graph::backward`]
//! and a central difference `(f(x+e) - f(x-e)) / 2e` per probed element.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub mod suite;

/// Entries whose magnitudes are both below this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Copy, Debug)]
pub enum Probe {
    /// Every element of every input.
    All,
    /// Up to `per_input` randomly chosen elements of each input.
    Sample { per_input: usize, seed: u64 },
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// `(input, element, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).data().iter().sum())
}

/// Compare analytic and central-difference gradients of `sum(f(inputs))`
/// with respect to every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], probe: Probe, eps: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let root = if g.value(out).numel() == 1 { out } else { g.sum(out) };
    g.backward(root)?;

    let mut report = GradReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; input.numel()]);
        let idx: Vec<usize> = match probe {
            Probe::All => (0..input.numel()).collect(),
            Probe::Sample { per_input, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
                let m = per_input.min(input.numel());
                let mut v = sample(&mut rng, input.numel(), m).into_vec();
                v.sort_unstable();
                v
            }
        };
        for i in idx {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + eps;
            let plus = eval_scalar(&f, &work)?;
            work[k].data_mut()[i] = orig - eps;
            let minus = eval_scalar(&f, &work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = rel_error(analytic[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((k, i, analytic[i], numeric));
            }
        }
    }
    Ok(report)
}

/// Single-input convenience: max relative error over all elements of `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let r = check_gradients(std::slice::from_ref(x), Probe::All, eps, |g, v| f(g, v[0]))?;
    Ok(r.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn linear_sum_has_zero_error() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 3), vec![0.1, -0.5, 0.9, 0.3, -0.7, 0.2]).unwrap();
        let err = grad_check(|_, v| Ok(v), &x, 1e-4).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn square_sum_matches_2x() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 4), vec![0.1, -0.5, 0.9, 0.3]).unwrap();
        let err = grad_check(|g, v| g.mul(v, v), &x, 1e-4).unwrap();
        assert!(err < 1e-8, "{err}");
    }
}
