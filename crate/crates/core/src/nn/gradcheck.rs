//! Central finite-difference checks of hand-written backward passes.
//!
//! A check compares a directional derivative: for a random input direction
//! `v` and a random output cotangent `w`, the analytic value `⟨Jᵀw, v⟩`
//! against `(⟨w, f(x + hv)⟩ − ⟨w, f(x − hv)⟩) / 2h`.

use rand::Rng;
use rand_distr::StandardNormal;

use super::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    /// Relative error with a small absolute floor on the denominator.
    pub fn rel_error(&self) -> f64 {
        let denom = self.analytic.abs().max(self.numeric.abs()).max(1e-6);
        (self.analytic - self.numeric).abs() / denom
    }
}

pub fn random_like<R: Rng + ?Sized>(t: &Tensor<f64>, rng: &mut R) -> Tensor<f64> {
    t.map(|_| rng.sample(StandardNormal))
}

fn inner(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// `forward` maps the inputs to an output tensor; `backward` receives the
/// inputs and an output cotangent and returns one gradient per input.
pub fn check<F, B, R>(inputs: &[Tensor<f64>], forward: F, backward: B, h: f64, rng: &mut R) -> GradCheck
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
    B: Fn(&[Tensor<f64>], &Tensor<f64>) -> Vec<Tensor<f64>>,
    R: Rng + ?Sized,
{
    let out = forward(inputs);
    let cotangent = random_like(&out, rng);
    let directions: Vec<_> = inputs.iter().map(|t| random_like(t, rng)).collect();

    let grads = backward(inputs, &cotangent);
    assert_eq!(grads.len(), inputs.len(), "one gradient per input");
    let analytic = grads.iter().zip(&directions).map(|(g, v)| inner(g, v)).sum();

    let shifted = |sign: f64| {
        let moved: Vec<_> = inputs
            .iter()
            .zip(&directions)
            .map(|(x, v)| {
                let mut x = x.clone();
                x.add_scaled(v, sign * h);
                x
            })
            .collect();
        inner(&forward(&moved), &cotangent)
    };
    let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
    GradCheck { analytic, numeric }
}
