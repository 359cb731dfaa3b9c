//! Fully factorized entropy model ("entropy bottleneck").
//!
//! Every latent channel owns a small monotone network mapping `x` to the
//! logit of a cumulative distribution `c(x)`. The probability of an integer
//! symbol `n` is `c(n + ½) − c(n − ½)`. During training the same network
//! gives differentiable rate estimates; after training it is sampled into
//! integer [`CodingTable`]s for the range coder.

mod prior;
pub(crate) mod table;

pub use prior::{FactorizedPrior, LIKELIHOOD_FLOOR};
pub use table::{build_tables, CodingTable, MAX_SUPPORT, PROB_BITS, PROB_TOTAL, TAIL_MASS};

use rand::Rng;

use crate::nn::{Real, Tensor};

/// Rounds half away from zero.
pub fn quantize<T: Real>(latent: &[T]) -> Vec<i32> {
    latent
        .iter()
        .map(|v| v.round().to_i32().unwrap_or(if *v > T::zero() { i32::MAX } else { i32::MIN }))
        .collect()
}

/// Adds i.i.d. `U(-½, ½)` noise, the training-time proxy for rounding.
/// The gradient with respect to `latent` is the identity.
pub fn noise_quantize<T: Real, R: Rng + ?Sized>(latent: &Tensor<T>, rng: &mut R) -> Tensor<T> {
    latent.map(|v| v + T::lit(rng.random::<f64>() - 0.5))
}
