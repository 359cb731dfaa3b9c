use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore, Real, Tensor};

/// Layer widths of the per-channel CDF network, input to output.
const WIDTHS: [usize; 5] = [1, 3, 3, 3, 1];
const LAYERS: usize = WIDTHS.len() - 1;
const INIT_SCALE: f64 = 10.0;

/// Likelihoods are clamped below at 2⁻²⁴ so the rate stays finite.
pub const LIKELIHOOD_FLOOR: f64 = 1.0 / (1u64 << 24) as f64;

/// Learned per-channel cumulative distributions.
///
/// Layer `k` of channel `i` computes `z = softplus(H)·h + b`, followed for
/// the hidden layers by `h' = z + tanh(a) ⊙ tanh(z)`. Softplus keeps every
/// matrix entry positive and `|tanh(a)| < 1` keeps each nonlinearity
/// increasing, so the composed logit is nondecreasing in `x`.
#[derive(Debug, Clone)]
pub struct FactorizedPrior {
    channels: usize,
    matrices: [ParamId; LAYERS],
    biases: [ParamId; LAYERS],
    factors: [ParamId; LAYERS - 1],
}

/// Effective (reparameterized) weights of one channel.
#[derive(Debug, Clone)]
struct ChannelNet<T> {
    matrices: [Vec<T>; LAYERS],
    biases: [Vec<T>; LAYERS],
    factors: [Vec<T>; LAYERS - 1],
}

/// Intermediate values of one logit evaluation.
#[derive(Debug, Clone, Default)]
struct Trace<T> {
    /// Input of each layer.
    inputs: [Vec<T>; LAYERS],
    /// Pre-nonlinearity output of each hidden layer.
    pre: [Vec<T>; LAYERS - 1],
}

/// Gradient accumulator for one channel's effective weights.
#[derive(Debug, Clone)]
struct ChannelGrads<T> {
    matrices: [Vec<T>; LAYERS],
    biases: [Vec<T>; LAYERS],
    factors: [Vec<T>; LAYERS - 1],
}

impl<T: Real> ChannelGrads<T> {
    fn zeros() -> Self {
        ChannelGrads {
            matrices: std::array::from_fn(|k| vec![T::zero(); WIDTHS[k] * WIDTHS[k + 1]]),
            biases: std::array::from_fn(|k| vec![T::zero(); WIDTHS[k + 1]]),
            factors: std::array::from_fn(|k| vec![T::zero(); WIDTHS[k + 1]]),
        }
    }
}

fn softplus<T: Real>(x: T) -> T {
    // log(1 + e^x) without overflow
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn sigmoid_grad<T: Real>(x: T) -> T {
    let e = (-x.abs()).exp();
    e / ((T::one() + e) * (T::one() + e))
}

impl<T: Real> ChannelNet<T> {
    fn logit(&self, x: T, trace: Option<&mut Trace<T>>) -> T {
        let mut h = vec![x];
        let mut trace = trace;
        for k in 0..LAYERS {
            let (w_in, w_out) = (WIDTHS[k], WIDTHS[k + 1]);
            let mut z = self.biases[k].clone();
            for (j, zj) in z.iter_mut().enumerate() {
                for (i, &hi) in h.iter().enumerate() {
                    *zj += self.matrices[k][j * w_in + i] * hi;
                }
            }
            debug_assert_eq!(z.len(), w_out);
            if let Some(t) = trace.as_deref_mut() {
                t.inputs[k] = h.clone();
            }
            if k + 1 < LAYERS {
                if let Some(t) = trace.as_deref_mut() {
                    t.pre[k] = z.clone();
                }
                h = z
                    .iter()
                    .zip(&self.factors[k])
                    .map(|(&zj, &a)| zj + a * zj.tanh())
                    .collect();
            } else {
                h = z;
            }
        }
        h[0]
    }

    /// Back-propagates `grad` (with respect to the logit) through a recorded
    /// evaluation. Returns the gradient with respect to `x`.
    fn backward(&self, trace: &Trace<T>, grad: T, acc: &mut ChannelGrads<T>) -> T {
        let mut g_out = vec![grad];
        for k in (0..LAYERS).rev() {
            let w_in = WIDTHS[k];
            let g_z: Vec<T> = if k + 1 < LAYERS {
                g_out
                    .iter()
                    .enumerate()
                    .map(|(j, &g)| {
                        let t = trace.pre[k][j].tanh();
                        acc.factors[k][j] += g * t;
                        g * (T::one() + self.factors[k][j] * (T::one() - t * t))
                    })
                    .collect()
            } else {
                g_out
            };
            let h = &trace.inputs[k];
            let mut g_h = vec![T::zero(); w_in];
            for (j, &gz) in g_z.iter().enumerate() {
                acc.biases[k][j] += gz;
                for i in 0..w_in {
                    acc.matrices[k][j * w_in + i] += gz * h[i];
                    g_h[i] += self.matrices[k][j * w_in + i] * gz;
                }
            }
            g_out = g_h;
        }
        g_out[0]
    }

    /// `(p, dp/dlower, dp/dupper)` from the logits at `n − ½` and `n + ½`.
    fn interval_probability(lower: T, upper: T) -> (T, T, T) {
        // Evaluate in whichever tail keeps the difference well conditioned.
        let p = if lower + upper > T::zero() {
            sigmoid(-lower) - sigmoid(-upper)
        } else {
            sigmoid(upper) - sigmoid(lower)
        };
        (p.abs(), -sigmoid_grad(lower), sigmoid_grad(upper))
    }
}

impl FactorizedPrior {
    /// Registers the prior's parameters under `prefix` in `store`.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        let scale = INIT_SCALE.powf(1.0 / LAYERS as f64);
        let matrices = std::array::from_fn(|k| {
            let init = (1.0 / scale / WIDTHS[k + 1] as f64).exp_m1().ln();
            store.add(
                format!("{prefix}.matrix{k}"),
                Tensor::full(&[channels, WIDTHS[k + 1] * WIDTHS[k]], T::lit(init)),
            )
        });
        let biases = std::array::from_fn(|k| {
            let n = WIDTHS[k + 1];
            let data = (0..channels * n)
                .map(|_| T::lit(rng.random_range(-0.5..0.5)))
                .collect();
            store.add(
                format!("{prefix}.bias{k}"),
                Tensor::from_vec(&[channels, n], data).unwrap(),
            )
        });
        let factors = std::array::from_fn(|k| {
            store.add(
                format!("{prefix}.factor{k}"),
                Tensor::zeros(&[channels, WIDTHS[k + 1]]),
            )
        });
        FactorizedPrior {
            channels,
            matrices,
            biases,
            factors,
        }
    }

    /// Re-attaches to parameters already present in `store`.
    pub fn attach<T: Real>(store: &ParamStore<T>, prefix: &str, channels: usize) -> Result<Self> {
        let find = |name: String| {
            store
                .find(&name)
                .ok_or_else(|| Error::format(format!("missing parameter `{name}`")))
        };
        let mut matrices = Vec::new();
        let mut biases = Vec::new();
        let mut factors = Vec::new();
        for k in 0..LAYERS {
            matrices.push(find(format!("{prefix}.matrix{k}"))?);
            biases.push(find(format!("{prefix}.bias{k}"))?);
            if k + 1 < LAYERS {
                factors.push(find(format!("{prefix}.factor{k}"))?);
            }
        }
        let prior = FactorizedPrior {
            channels,
            matrices: matrices.try_into().unwrap(),
            biases: biases.try_into().unwrap(),
            factors: factors.try_into().unwrap(),
        };
        for k in 0..LAYERS {
            let shape = store.value(prior.matrices[k]).shape();
            if shape != [channels, WIDTHS[k + 1] * WIDTHS[k]] {
                return Err(Error::shape("factorized_prior", format!("matrix{k}: {shape:?}")));
            }
        }
        Ok(prior)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn channel_net<T: Real>(&self, store: &ParamStore<T>, ch: usize) -> ChannelNet<T> {
        let slice = |id: ParamId, len: usize| store.value(id).data()[ch * len..(ch + 1) * len].to_vec();
        ChannelNet {
            matrices: std::array::from_fn(|k| {
                let len = WIDTHS[k] * WIDTHS[k + 1];
                slice(self.matrices[k], len).into_iter().map(softplus).collect()
            }),
            biases: std::array::from_fn(|k| slice(self.biases[k], WIDTHS[k + 1])),
            factors: std::array::from_fn(|k| {
                slice(self.factors[k], WIDTHS[k + 1])
                    .into_iter()
                    .map(|a| a.tanh())
                    .collect()
            }),
        }
    }

    /// Logit of the cumulative distribution of channel `ch` at `x`.
    pub fn cdf_logit<T: Real>(&self, store: &ParamStore<T>, ch: usize, x: T) -> T {
        self.channel_net(store, ch).logit(x, None)
    }

    pub fn cdf<T: Real>(&self, store: &ParamStore<T>, ch: usize, x: T) -> T {
        sigmoid(self.cdf_logit(store, ch, x))
    }

    /// Unfloored probability of integer-centred bin `[x − ½, x + ½]`.
    pub fn bin_probability<T: Real>(&self, store: &ParamStore<T>, ch: usize, x: T) -> T {
        let net = self.channel_net(store, ch);
        let half = T::lit(0.5);
        ChannelNet::interval_probability(net.logit(x - half, None), net.logit(x + half, None)).0
    }

    /// Floored per-channel likelihoods of a single latent vector.
    pub fn likelihoods<T: Real>(&self, store: &ParamStore<T>, latent: &[T]) -> Result<Vec<T>> {
        if latent.len() != self.channels {
            return Err(Error::Length {
                expected: self.channels,
                got: latent.len(),
            });
        }
        let floor = T::lit(LIKELIHOOD_FLOOR);
        Ok(latent
            .iter()
            .enumerate()
            .map(|(ch, &x)| self.bin_probability(store, ch, x).max(floor))
            .collect())
    }

    /// `Σ_i −log₂ p_i(latent_i)`.
    pub fn rate_bits<T: Real>(&self, store: &ParamStore<T>, latent: &[T]) -> Result<T> {
        Ok(self
            .likelihoods(store, latent)?
            .into_iter()
            .map(|p| -p.log2())
            .sum())
    }

    /// Rate of every column of an `N × B` latent batch, in bits per column.
    ///
    /// When `grad_weight` is given, the gradient of `grad_weight · Σ_b rate_b`
    /// is accumulated into the prior's parameters and returned for the
    /// latent. Values below the likelihood floor still pass the gradient of
    /// the floored value back, so training can pull stray latents in.
    pub fn rate_batch<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        latent: &Tensor<T>,
        grad_weight: Option<T>,
    ) -> Result<(Vec<T>, Option<Tensor<T>>)> {
        if latent.rows() != self.channels {
            return Err(Error::Length {
                expected: self.channels,
                got: latent.rows(),
            });
        }
        let cols = latent.cols();
        let floor = T::lit(LIKELIHOOD_FLOOR);
        let half = T::lit(0.5);
        let ln2 = T::lit(std::f64::consts::LN_2);
        let mut rates = vec![T::zero(); cols];
        let mut grad_latent = grad_weight.map(|_| Tensor::zeros(latent.shape()));
        let mut all_grads = Vec::with_capacity(if grad_weight.is_some() { self.channels } else { 0 });

        for ch in 0..self.channels {
            let net = self.channel_net(store, ch);
            let mut acc = grad_weight.map(|_| ChannelGrads::zeros());
            for (j, &x) in latent.row(ch).iter().enumerate() {
                match (&mut acc, grad_weight) {
                    (Some(acc), Some(w)) => {
                        let (mut tl, mut tu) = (Trace::default(), Trace::default());
                        let lower = net.logit(x - half, Some(&mut tl));
                        let upper = net.logit(x + half, Some(&mut tu));
                        let (p, dl, du) = ChannelNet::interval_probability(lower, upper);
                        let p = p.max(floor);
                        rates[j] += -p.log2();
                        let g_p = -w / (p * ln2);
                        let gx = net.backward(&tl, g_p * dl, acc) + net.backward(&tu, g_p * du, acc);
                        grad_latent.as_mut().unwrap().row_mut(ch)[j] = gx;
                    }
                    _ => {
                        let lower = net.logit(x - half, None);
                        let upper = net.logit(x + half, None);
                        let p = ChannelNet::interval_probability(lower, upper).0.max(floor);
                        rates[j] += -p.log2();
                    }
                }
            }
            if let Some(acc) = acc {
                all_grads.push((ch, acc));
            }
        }
        if grad_weight.is_some() {
            self.accumulate(store, &all_grads);
        }
        Ok((rates, grad_latent))
    }

    /// Chains effective-weight gradients through the reparameterizations
    /// and adds them to the store.
    fn accumulate<T: Real>(&self, store: &mut ParamStore<T>, grads: &[(usize, ChannelGrads<T>)]) {
        for k in 0..LAYERS {
            let len = WIDTHS[k] * WIDTHS[k + 1];
            let raw = store.value(self.matrices[k]).clone();
            let mut g = Tensor::zeros(raw.shape());
            for (ch, acc) in grads {
                for i in 0..len {
                    let idx = ch * len + i;
                    g.data_mut()[idx] = acc.matrices[k][i] * sigmoid(raw.data()[idx]);
                }
            }
            store.accumulate(self.matrices[k], &g);

            let n = WIDTHS[k + 1];
            let mut g = Tensor::zeros(&[self.channels, n]);
            for (ch, acc) in grads {
                g.data_mut()[ch * n..(ch + 1) * n].copy_from_slice(&acc.biases[k]);
            }
            store.accumulate(self.biases[k], &g);

            if k + 1 < LAYERS {
                let raw = store.value(self.factors[k]).clone();
                let mut g = Tensor::zeros(raw.shape());
                for (ch, acc) in grads {
                    for i in 0..n {
                        let idx = ch * n + i;
                        let t = raw.data()[idx].tanh();
                        g.data_mut()[idx] = acc.factors[k][i] * (T::one() - t * t);
                    }
                }
                store.accumulate(self.factors[k], &g);
            }
        }
    }

    /// Parameter ids, for optimizers that treat the prior separately.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.matrices.to_vec();
        ids.extend_from_slice(&self.biases);
        ids.extend_from_slice(&self.factors);
        ids
    }

    /// Solves `cdf_logit(x) = target` by bisection. Returns `None` if the
    /// target is not reached within `|x| ≤ limit`.
    pub fn solve_logit(&self, store: &ParamStore<f64>, ch: usize, target: f64, limit: f64) -> Option<f64> {
        let net = self.channel_net(store, ch);
        let (mut lo, mut hi) = (-1.0, 1.0);
        while net.logit(lo, None) > target {
            lo *= 2.0;
            if lo < -limit {
                return None;
            }
        }
        while net.logit(hi, None) < target {
            hi *= 2.0;
            if hi > limit {
                return None;
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if net.logit(mid, None) < target {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-9 {
                break;
            }
        }
        Some(0.5 * (lo + hi))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::gradcheck;
    use crate::nn::Adam;

    fn prior(channels: usize, seed: u64) -> (ParamStore<f64>, FactorizedPrior) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = FactorizedPrior::new(&mut store, "eb", channels, &mut rng);
        (store, p)
    }

    #[test]
    fn cdf_monotone_and_bounded() {
        let (mut store, p) = prior(4, 1);
        // Perturb away from the linear initialization.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for param in store.iter_mut() {
            for v in param.value.data_mut() {
                *v += rng.random_range(-1.0..1.0);
            }
        }
        for ch in 0..4 {
            for _ in 0..1000 {
                let a: f64 = rng.random_range(-50.0..50.0);
                let b: f64 = rng.random_range(-50.0..50.0);
                let (x1, x2) = (a.min(b), a.max(b));
                let (c1, c2) = (p.cdf(&store, ch, x1), p.cdf(&store, ch, x2));
                assert!(c1 <= c2);
                assert!((0.0..=1.0).contains(&c1) && (0.0..=1.0).contains(&c2));
            }
            assert!(p.cdf(&store, ch, -1e6) < 1e-6);
            assert!(p.cdf(&store, ch, 1e6) > 1.0 - 1e-6);
        }
    }

    #[test]
    fn probabilities_sum_to_at_most_one() {
        let (store, p) = prior(3, 3);
        for ch in 0..3 {
            let total: f64 = (-1000..=1000).map(|n| p.bin_probability(&store, ch, n as f64)).sum();
            assert!(total <= 1.0 + 1e-4, "{total}");
            assert!(total > 0.999, "{total}");
        }
    }

    #[test]
    fn fresh_model_is_symmetric_about_median() {
        let (store, p) = prior(3, 4);
        for ch in 0..3 {
            let median = p.solve_logit(&store, ch, 0.0, 1e6).unwrap();
            for n in 1..10 {
                let up = p.bin_probability(&store, ch, median + n as f64);
                let down = p.bin_probability(&store, ch, median - n as f64);
                assert!((up - down).abs() < 1e-3, "{up} vs {down}");
            }
        }
    }

    #[test]
    fn uniform_half_likelihood_gives_one_bit_each() {
        let (store, p) = prior(5, 5);
        let latent = vec![0.0; 5];
        let probs = p.likelihoods(&store, &latent).unwrap();
        let rate = p.rate_bits(&store, &latent).unwrap();
        let expected: f64 = probs.iter().map(|q| -q.log2()).sum();
        assert!((rate - expected).abs() < 1e-12);
        assert!(rate >= 0.0);
        assert!(p.likelihoods(&store, &[0.0; 4]).is_err());
        // p = ½ per channel ⇒ rate = N bits, checked on the formula itself.
        let halves = [0.5f64; 5];
        assert_eq!(halves.iter().map(|q| -q.log2()).sum::<f64>(), 5.0);
    }

    #[test]
    fn likelihood_floor_applies() {
        let (store, p) = prior(2, 6);
        let probs = p.likelihoods(&store, &[1e5, -1e5]).unwrap();
        assert!(probs.iter().all(|&q| q == LIKELIHOOD_FLOOR));
    }

    #[test]
    fn training_concentrates_mass() {
        let (mut store, p) = prior(2, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let adam = Adam::new(1e-2);
        for _ in 0..100 {
            let batch = Tensor::from_fn(2, 64, |_, _| rng.random_range(-0.5..0.5));
            store.zero_grad();
            p.rate_batch(&mut store, &batch, Some(1.0 / 64.0)).unwrap();
            adam.step(&mut store).unwrap();
        }
        for ch in 0..2 {
            assert!(p.bin_probability(&store, ch, 0.0) > p.bin_probability(&store, ch, 5.0));
        }
    }

    #[test]
    fn rate_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let (mut store, p) = prior(3, 100 + trial);
            for param in store.iter_mut() {
                for v in param.value.data_mut() {
                    *v += rng.random_range(-0.5..0.5);
                }
            }
            let latent = Tensor::from_fn(3, 4, |_, _| rng.random_range(-4.0..4.0));
            let mut inputs = vec![latent];
            inputs.extend(store.iter().map(|q| q.value.clone()));
            let build = |inputs: &[Tensor<f64>]| {
                let mut s = store.clone();
                for (id, v) in s.ids().collect::<Vec<_>>().into_iter().zip(&inputs[1..]) {
                    s.set_value(id, v.clone()).unwrap();
                }
                s
            };
            let forward = |inputs: &[Tensor<f64>]| {
                let mut s = build(inputs);
                let (r, _) = p.rate_batch(&mut s, &inputs[0], None).unwrap();
                Tensor::from_vec(&[r.len()], r).unwrap()
            };
            let backward = |inputs: &[Tensor<f64>], cot: &Tensor<f64>| {
                // Columns carry different cotangent weights; scale each column
                // separately by running one column at a time.
                let mut s = build(inputs);
                s.zero_grad();
                let mut g_latent = Tensor::zeros(inputs[0].shape());
                for j in 0..inputs[0].cols() {
                    let col = inputs[0].select_columns(&[j]);
                    let (_, g) = p.rate_batch(&mut s, &col, Some(cot.data()[j])).unwrap();
                    let g = g.unwrap();
                    for r in 0..3 {
                        g_latent.row_mut(r)[j] = g.at(r, 0);
                    }
                }
                let mut out = vec![g_latent];
                out.extend(s.iter().map(|q| q.grad.clone()));
                out
            };
            let c = gradcheck::check(&inputs, forward, backward, 1e-4, &mut rng);
            assert!(c.rel_error() <= 1e-4, "{c:?}");
        }
    }
}
