use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{CodecConfig, INPUT_CHANNELS};
use crate::entropy::{noise_quantize, quantize, FactorizedPrior};
use crate::error::{Error, Result};
use crate::nn::{
    argmax_columns, batch_norm, batch_norm_backward, batch_norm_eval, channel_shuffle, channel_shuffle_backward,
    dropout, dropout_backward, linear, max_pool_backward, max_pool_points, pointwise_conv, pointwise_conv_backward,
    relu, relu_backward, scale_channels, scale_channels_backward, softmax_cross_entropy, BatchNormCache,
    BatchNormState, CrossEntropy, Mode, ParamId, ParamStore, Pooled, Real, Tensor,
};

/// Constant applied to the pooled features together with the gain vector.
pub const LATENT_SCALE: f64 = 10.0;
pub const PRIOR_PREFIX: &str = "entropy";

#[derive(Debug, Clone)]
struct EncoderBlock<T> {
    weight: ParamId,
    bias: ParamId,
    gamma: ParamId,
    beta: ParamId,
    norm: BatchNormState<T>,
    groups: usize,
    shuffle_before: Option<usize>,
}

#[derive(Debug, Clone)]
struct HiddenNorm<T> {
    gamma: ParamId,
    beta: ParamId,
    state: BatchNormState<T>,
}

#[derive(Debug, Clone)]
struct DecoderLayer<T> {
    weight: ParamId,
    bias: ParamId,
    /// Batch norm and ReLU follow every layer but the last.
    norm: Option<HiddenNorm<T>>,
}

/// Eval-mode analysis of one cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct Analysis<T> {
    /// Latent `y` of length `N`.
    pub latent: Vec<T>,
    /// Index of the point attaining the maximum of each latent channel.
    pub argmax: Vec<usize>,
}

/// Points whose features alone determine the latent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CriticalPointSet {
    /// Sorted, distinct point indices.
    pub indices: Vec<usize>,
    /// Per latent channel, the index of its maximizing point.
    pub argmax: Vec<usize>,
}

/// The analysis transform, entropy bottleneck and synthesis transform
/// together with their parameters.
#[derive(Debug, Clone)]
pub struct Codec<T = f32> {
    config: CodecConfig,
    params: ParamStore<T>,
    blocks: Vec<EncoderBlock<T>>,
    gain: ParamId,
    prior: FactorizedPrior,
    decoder: Vec<DecoderLayer<T>>,
    mode: Mode,
}

fn kaiming<T: Real, R: Rng + ?Sized>(rows: usize, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(rows, fan_in, |_, _| T::lit(rng.random_range(-bound..bound)))
}

impl<T: Real> Codec<T> {
    /// Fresh model with Kaiming-uniform weights, zero biases, identity batch
    /// norms and a unit gain. Starts in train mode.
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut blocks = Vec::with_capacity(config.encoder.len());
        let mut c_in = INPUT_CHANNELS;
        for (i, l) in config.encoder.iter().enumerate() {
            let c = l.out_channels;
            blocks.push(EncoderBlock {
                weight: params.add(format!("encoder.{i}.weight"), kaiming(c, c_in / l.groups, &mut rng)),
                bias: params.add(format!("encoder.{i}.bias"), Tensor::zeros(&[c])),
                gamma: params.add(format!("encoder.{i}.bn.weight"), Tensor::full(&[c], T::one())),
                beta: params.add(format!("encoder.{i}.bn.bias"), Tensor::zeros(&[c])),
                norm: BatchNormState::new(c),
                groups: l.groups,
                shuffle_before: l.shuffle_before,
            });
            c_in = c;
        }
        let latent = config.latent();
        let gain = params.add("gain", Tensor::full(&[latent], T::one()));
        let prior = FactorizedPrior::new(&mut params, PRIOR_PREFIX, latent, &mut rng);
        let mut decoder = Vec::with_capacity(config.decoder.len());
        for (i, &out) in config.decoder.iter().enumerate() {
            let hidden = i + 1 < config.decoder.len();
            decoder.push(DecoderLayer {
                weight: params.add(format!("decoder.{i}.weight"), kaiming(out, c_in, &mut rng)),
                bias: params.add(format!("decoder.{i}.bias"), Tensor::zeros(&[out])),
                norm: hidden.then(|| HiddenNorm {
                    gamma: params.add(format!("decoder.{i}.bn.weight"), Tensor::full(&[out], T::one())),
                    beta: params.add(format!("decoder.{i}.bn.bias"), Tensor::zeros(&[out])),
                    state: BatchNormState::new(out),
                }),
            });
            c_in = out;
        }
        Ok(Codec {
            config,
            params,
            blocks,
            gain,
            prior,
            decoder,
            mode: Mode::Train,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn latent_size(&self) -> usize {
        self.config.latent()
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn prior(&self) -> &FactorizedPrior {
        &self.prior
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Running batch-norm statistics by layer name, in a stable order.
    pub fn batch_norms(&self) -> Vec<(String, &BatchNormState<T>)> {
        let enc = self.blocks.iter().enumerate().map(|(i, b)| (format!("encoder.{i}.bn"), &b.norm));
        let dec = self
            .decoder
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.norm.as_ref().map(|n| (format!("decoder.{i}.bn"), &n.state)));
        enc.chain(dec).collect()
    }

    pub fn batch_norm_mut(&mut self, name: &str) -> Option<&mut BatchNormState<T>> {
        let (part, rest) = name.split_once('.')?;
        let index: usize = rest.strip_suffix(".bn")?.parse().ok()?;
        match part {
            "encoder" => self.blocks.get_mut(index).map(|b| &mut b.norm),
            "decoder" => self.decoder.get_mut(index)?.norm.as_mut().map(|n| &mut n.state),
            _ => None,
        }
    }

    /// Same model in another precision.
    pub fn cast<U: Real>(&self) -> Codec<U> {
        Codec {
            config: self.config.clone(),
            params: self.params.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| EncoderBlock {
                    weight: b.weight,
                    bias: b.bias,
                    gamma: b.gamma,
                    beta: b.beta,
                    norm: b.norm.cast(),
                    groups: b.groups,
                    shuffle_before: b.shuffle_before,
                })
                .collect(),
            gain: self.gain,
            prior: self.prior.clone(),
            decoder: self
                .decoder
                .iter()
                .map(|l| DecoderLayer {
                    weight: l.weight,
                    bias: l.bias,
                    norm: l.norm.as_ref().map(|n| HiddenNorm {
                        gamma: n.gamma,
                        beta: n.beta,
                        state: n.state.cast(),
                    }),
                })
                .collect(),
            mode: self.mode,
        }
    }

    fn check_input(&self, cloud: &Tensor<T>, points: usize) -> Result<()> {
        if cloud.shape().len() != 2 || cloud.rows() != INPUT_CHANNELS {
            return Err(Error::shape(
                "analyze",
                format!("expected 3 coordinate rows, got shape {:?}", cloud.shape()),
            ));
        }
        if points == 0 || cloud.cols() == 0 {
            return Err(Error::Empty("point cloud"));
        }
        if cloud.cols() % points != 0 {
            return Err(Error::shape(
                "analyze",
                format!("{} columns is not a whole number of {points}-point clouds", cloud.cols()),
            ));
        }
        Ok(())
    }

    /// Per-point features `h(x)` (`N × (B·P)`) using the running batch-norm
    /// statistics.
    pub fn point_features(&self, cloud: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(cloud, cloud.cols().max(1))?;
        self.features_eval(cloud)
    }

    fn features_eval(&self, cloud: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = cloud.clone();
        for b in &self.blocks {
            if let Some(g) = b.shuffle_before {
                h = channel_shuffle(&h, g)?;
            }
            let z = pointwise_conv(&h, self.params.value(b.weight), self.params.value(b.bias), b.groups)?;
            let z = batch_norm_eval(&z, self.params.value(b.gamma), self.params.value(b.beta), &b.norm)?;
            h = relu(&z);
        }
        Ok(h)
    }

    /// Analysis of `B` clouds of `points` points laid out as `3 × (B·P)`,
    /// returning the `N × B` latents and the pooling record. Uses the running
    /// batch-norm statistics whatever the mode.
    pub fn analyze_batch(&self, clouds: &Tensor<T>, points: usize) -> Result<(Tensor<T>, Pooled<T>)> {
        self.check_input(clouds, points)?;
        let h = self.features_eval(clouds)?;
        let pooled = max_pool_points(&h, points)?;
        let y = scale_channels(&pooled.values, self.params.value(self.gain), T::lit(LATENT_SCALE))?;
        Ok((y, pooled))
    }

    /// `y = 10 · v ⊙ maxpool(h(x))` for one `3 × P` cloud.
    pub fn analyze(&self, cloud: &Tensor<T>) -> Result<Analysis<T>> {
        let (y, pooled) = self.analyze_batch(cloud, cloud.cols())?;
        Ok(Analysis {
            latent: y.into_data(),
            argmax: pooled.argmax,
        })
    }

    /// Union of the per-channel maximizing points (ties resolve to the
    /// lowest index). The critical points alone reproduce the latent.
    pub fn critical_points(&self, cloud: &Tensor<T>) -> Result<CriticalPointSet> {
        if self.mode != Mode::Eval {
            return Err(Error::Mode("eval"));
        }
        let argmax = self.analyze(cloud)?.argmax;
        let mut indices = argmax.clone();
        indices.sort_unstable();
        indices.dedup();
        Ok(CriticalPointSet { indices, argmax })
    }

    /// Logits (`T × B`) of `N × B` latents with running batch-norm
    /// statistics and no dropout.
    pub fn synthesize_batch(&self, latent: &Tensor<T>) -> Result<Tensor<T>> {
        if latent.shape().len() != 2 || latent.rows() != self.latent_size() {
            return Err(Error::Length {
                expected: self.latent_size(),
                got: latent.shape().first().copied().unwrap_or(0),
            });
        }
        let mut h = latent.clone();
        for l in &self.decoder {
            h = linear(&h, self.params.value(l.weight), self.params.value(l.bias))?;
            if let Some(n) = &l.norm {
                h = batch_norm_eval(&h, self.params.value(n.gamma), self.params.value(n.beta), &n.state)?;
                h = relu(&h);
            }
        }
        Ok(h)
    }

    pub fn synthesize(&self, latent: &[T]) -> Result<Vec<T>> {
        if latent.len() != self.latent_size() {
            return Err(Error::Length {
                expected: self.latent_size(),
                got: latent.len(),
            });
        }
        let t = Tensor::from_vec(&[latent.len(), 1], latent.to_vec())?;
        Ok(self.synthesize_batch(&t)?.into_data())
    }

    /// Logits of the quantized latent: `g_s(round(g_a(x)))`.
    pub fn classify(&self, cloud: &Tensor<T>) -> Result<Vec<T>> {
        let y = self.analyze(cloud)?.latent;
        let q: Vec<T> = quantize(&y).into_iter().map(|v| T::lit(f64::from(v))).collect();
        self.synthesize(&q)
    }

    /// Training forward pass over `B` clouds laid out as `3 × (B·P)`.
    ///
    /// Batch norms use batch statistics and update their running estimates;
    /// the latent is perturbed with uniform noise; dropout is active. The
    /// loss is `mean_b rate_b + λ · mean_b CE_b` with rates in bits and
    /// cross-entropy in nats.
    pub fn forward_train<R: Rng + ?Sized>(
        &mut self,
        clouds: &Tensor<T>,
        labels: &[usize],
        lambda: T,
        rng: &mut R,
    ) -> Result<Trace<T>> {
        if self.mode != Mode::Train {
            return Err(Error::Mode("train"));
        }
        let batch = labels.len();
        if batch == 0 {
            return Err(Error::Empty("training batch"));
        }
        let points = clouds.cols() / batch;
        self.check_input(clouds, points.max(1))?;
        if points * batch != clouds.cols() {
            return Err(Error::Length {
                expected: batch * points.max(1),
                got: clouds.cols(),
            });
        }

        let mut encoder = Vec::with_capacity(self.blocks.len());
        let mut h = clouds.clone();
        for b in &mut self.blocks {
            if let Some(g) = b.shuffle_before {
                h = channel_shuffle(&h, g)?;
            }
            let z = pointwise_conv(&h, self.params.value(b.weight), self.params.value(b.bias), b.groups)?;
            let (z, cache) = batch_norm(
                &z,
                self.params.value(b.gamma),
                self.params.value(b.beta),
                &mut b.norm,
                Mode::Train,
            )?;
            let out = relu(&z);
            encoder.push(BlockTrace {
                input: h,
                norm: cache,
                pre_relu: z,
            });
            h = out;
        }
        let pooled = max_pool_points(&h, points)?;
        let y = scale_channels(&pooled.values, self.params.value(self.gain), T::lit(LATENT_SCALE))?;
        let noisy = noise_quantize(&y, rng);
        let (rates, _) = self.prior.rate_batch(&mut self.params, &noisy, None)?;

        let mut decoder = Vec::with_capacity(self.decoder.len());
        let mut h = noisy.clone();
        let last = self.decoder.len() - 1;
        let mut mask = None;
        for (i, l) in self.decoder.iter_mut().enumerate() {
            if i == last {
                let (d, m) = dropout(&h, self.config.dropout, Mode::Train, rng);
                mask = m;
                h = d;
            }
            let z = linear(&h, self.params.value(l.weight), self.params.value(l.bias))?;
            let input = std::mem::replace(&mut h, z);
            let mut trace = DecoderTrace {
                input,
                norm: None,
            };
            if let Some(n) = &mut l.norm {
                let (z, cache) = batch_norm(
                    &h,
                    self.params.value(n.gamma),
                    self.params.value(n.beta),
                    &mut n.state,
                    Mode::Train,
                )?;
                h = relu(&z);
                trace.norm = Some((cache, z));
            }
            decoder.push(trace);
        }
        let ce = softmax_cross_entropy(&h, labels)?;
        let b = T::from_usize(batch).unwrap();
        let rate = rates.iter().copied().sum::<T>() / b;
        let cross_entropy = ce.mean();
        Ok(Trace {
            labels: labels.to_vec(),
            lambda,
            predictions: argmax_columns(&h),
            loss: rate + lambda * cross_entropy,
            rate,
            cross_entropy,
            rates,
            encoder,
            pooled,
            noisy,
            decoder,
            mask,
            ce,
        })
    }

    /// Accumulates the gradient of `trace.loss` into the parameter store and
    /// returns the gradient with respect to the input clouds.
    pub fn backward(&mut self, trace: &Trace<T>) -> Result<Tensor<T>> {
        let batch = T::from_usize(trace.labels.len()).unwrap();
        let mut g = trace.ce.backward(&trace.labels, trace.lambda / batch);
        for (l, t) in self.decoder.iter().zip(&trace.decoder).rev() {
            if let (Some(n), Some((cache, pre))) = (&l.norm, &t.norm) {
                g = relu_backward(pre, &g);
                let (gx, gg, gb) = batch_norm_backward(cache, self.params.value(n.gamma), &g);
                self.params.accumulate(n.gamma, &gg);
                self.params.accumulate(n.beta, &gb);
                g = gx;
            }
            let grads = pointwise_conv_backward(&t.input, self.params.value(l.weight), 1, &g);
            self.params.accumulate(l.weight, &grads.weight);
            self.params.accumulate(l.bias, &grads.bias);
            g = grads.input;
            if std::ptr::eq(t, trace.decoder.last().unwrap()) {
                g = dropout_backward(trace.mask.as_ref(), &g);
            }
        }

        let (_, g_rate) = self
            .prior
            .rate_batch(&mut self.params, &trace.noisy, Some(T::one() / batch))?;
        g.add_scaled(&g_rate.expect("gradient requested"), T::one());

        let (g_pool, g_gain) = scale_channels_backward(
            &trace.pooled.values,
            self.params.value(self.gain),
            T::lit(LATENT_SCALE),
            &g,
        );
        self.params.accumulate(self.gain, &g_gain);
        let mut g = max_pool_backward(&trace.pooled, &g_pool);

        for (b, t) in self.blocks.iter().zip(&trace.encoder).rev() {
            g = relu_backward(&t.pre_relu, &g);
            let (gx, gg, gb) = batch_norm_backward(&t.norm, self.params.value(b.gamma), &g);
            self.params.accumulate(b.gamma, &gg);
            self.params.accumulate(b.beta, &gb);
            let grads = pointwise_conv_backward(&t.input, self.params.value(b.weight), b.groups, &gx);
            self.params.accumulate(b.weight, &grads.weight);
            self.params.accumulate(b.bias, &grads.bias);
            g = grads.input;
            if let Some(groups) = b.shuffle_before {
                g = channel_shuffle_backward(&g, groups);
            }
        }
        Ok(g)
    }

    /// Folds every batch norm and the gain magnitude into the convolutions.
    pub fn fuse(&self) -> Result<FusedEncoder<T>> {
        if self.mode != Mode::Eval {
            return Err(Error::Mode("eval"));
        }
        let last = self.blocks.len() - 1;
        let gain = self.params.value(self.gain).data();
        let factor = T::lit(LATENT_SCALE);
        let mut layers = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let (scale, shift) = b
                .norm
                .eval_affine(self.params.value(b.gamma).data(), self.params.value(b.beta).data());
            let mut weight = self.params.value(b.weight).clone();
            let mut bias = self.params.value(b.bias).clone();
            for o in 0..weight.rows() {
                let extra = if i == last { (factor * gain[o]).abs() } else { T::one() };
                let s = scale[o] * extra;
                for w in weight.row_mut(o) {
                    *w *= s;
                }
                let bo = &mut bias.data_mut()[o];
                *bo = (*bo * scale[o] + shift[o]) * extra;
            }
            layers.push(FusedLayer {
                weight,
                bias,
                groups: b.groups,
                shuffle_before: b.shuffle_before,
            });
        }
        let sign = gain
            .iter()
            .map(|&v| if v < T::zero() { -T::one() } else { T::one() })
            .collect();
        Ok(FusedEncoder { layers, sign })
    }
}

#[derive(Debug, Clone)]
struct BlockTrace<T> {
    input: Tensor<T>,
    norm: BatchNormCache<T>,
    pre_relu: Tensor<T>,
}

#[derive(Debug, Clone)]
struct DecoderTrace<T> {
    input: Tensor<T>,
    norm: Option<(BatchNormCache<T>, Tensor<T>)>,
}

/// Activations of one training forward pass, consumed by
/// [`Codec::backward`].
#[derive(Debug, Clone)]
pub struct Trace<T> {
    pub labels: Vec<usize>,
    pub lambda: T,
    pub predictions: Vec<usize>,
    pub loss: T,
    /// Mean rate in bits per cloud.
    pub rate: T,
    /// Mean cross-entropy in nats.
    pub cross_entropy: T,
    pub rates: Vec<T>,
    encoder: Vec<BlockTrace<T>>,
    pooled: Pooled<T>,
    noisy: Tensor<T>,
    decoder: Vec<DecoderTrace<T>>,
    mask: Option<Tensor<T>>,
    ce: CrossEntropy<T>,
}

impl<T> Trace<T> {
    pub fn correct(&self) -> usize {
        self.predictions.iter().zip(&self.labels).filter(|(p, l)| p == l).count()
    }
}

#[derive(Debug, Clone)]
struct FusedLayer<T> {
    weight: Tensor<T>,
    bias: Tensor<T>,
    groups: usize,
    shuffle_before: Option<usize>,
}

/// Inference encoder with batch norm and gain folded into the convolutions.
/// Each channel's sign of the gain is applied after pooling.
#[derive(Debug, Clone)]
pub struct FusedEncoder<T> {
    layers: Vec<FusedLayer<T>>,
    sign: Vec<T>,
}

impl<T: Real> FusedEncoder<T> {
    pub fn analyze(&self, cloud: &Tensor<T>) -> Result<Vec<T>> {
        if cloud.shape().len() != 2 || cloud.rows() != INPUT_CHANNELS {
            return Err(Error::shape("fused_analyze", format!("shape {:?}", cloud.shape())));
        }
        let mut h = cloud.clone();
        for l in &self.layers {
            if let Some(g) = l.shuffle_before {
                h = channel_shuffle(&h, g)?;
            }
            h = relu(&pointwise_conv(&h, &l.weight, &l.bias, l.groups)?);
        }
        let pooled = max_pool_points(&h, cloud.cols())?;
        Ok(pooled.values.data().iter().zip(&self.sign).map(|(&v, &s)| v * s).collect())
    }

    pub fn macs_per_point(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len()).sum()
    }
}
