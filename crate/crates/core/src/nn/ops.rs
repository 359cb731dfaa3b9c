use rand::Rng;

use crate::error::{Error, Result};

use super::{Mode, Real, Tensor};

fn require_2d<T: Real>(op: &'static str, x: &Tensor<T>) -> Result<()> {
    if x.shape().len() != 2 {
        return Err(Error::shape(op, format!("expected 2-D input, got {:?}", x.shape())));
    }
    Ok(())
}

fn check_groups(op: &'static str, channels: usize, groups: usize) -> Result<()> {
    if groups == 0 || channels % groups != 0 {
        return Err(Error::Groups {
            op,
            channels,
            groups,
        });
    }
    Ok(())
}

/// Multiply-accumulate count per point of a kernel-size-1 convolution.
pub fn conv_macs(c_in: usize, c_out: usize, groups: usize) -> usize {
    c_in * c_out / groups
}

/// Multiply-accumulate count of a fully-connected layer.
pub fn linear_macs(inputs: usize, outputs: usize) -> usize {
    inputs * outputs
}

/// Kernel-size-1 (grouped) convolution over the point dimension.
///
/// `weight` is `C_out × (C_in / groups)`; output channel `o` belongs to group
/// `o / (C_out / groups)` and reads only that group's input channels. Each
/// output column is computed from the matching input column alone, always in
/// the same accumulation order.
pub fn pointwise_conv<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    groups: usize,
) -> Result<Tensor<T>> {
    const OP: &str = "pointwise_conv";
    require_2d(OP, input)?;
    require_2d(OP, weight)?;
    let (c_in, cols) = (input.rows(), input.cols());
    let c_out = weight.rows();
    check_groups(OP, c_in, groups)?;
    check_groups(OP, c_out, groups)?;
    let in_per = c_in / groups;
    let out_per = c_out / groups;
    if weight.cols() != in_per || bias.len() != c_out {
        return Err(Error::shape(
            OP,
            format!(
                "input {c_in} channels, groups {groups}: weight {:?}, bias {:?}",
                weight.shape(),
                bias.shape()
            ),
        ));
    }

    let mut out = Tensor::zeros(&[c_out, cols]);
    for o in 0..c_out {
        let base = (o / out_per) * in_per;
        let row = out.row_mut(o);
        row.fill(bias.data()[o]);
        for k in 0..in_per {
            let w = weight.at(o, k);
            for (y, &x) in row.iter_mut().zip(input.row(base + k)) {
                *y += w * x;
            }
        }
    }
    Ok(out)
}

/// Fully-connected layer; columns are samples.
pub fn linear<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    pointwise_conv(input, weight, bias, 1)
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn pointwise_conv_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    groups: usize,
    grad_out: &Tensor<T>,
) -> ConvGrads<T> {
    let (c_in, cols) = (input.rows(), input.cols());
    let c_out = weight.rows();
    let in_per = c_in / groups;
    let out_per = c_out / groups;

    let mut g_in = Tensor::zeros(&[c_in, cols]);
    let mut g_w = Tensor::zeros(weight.shape());
    let mut g_b = Tensor::zeros(&[c_out]);
    for o in 0..c_out {
        let base = (o / out_per) * in_per;
        let gy = grad_out.row(o);
        g_b.data_mut()[o] = gy.iter().copied().sum();
        for k in 0..in_per {
            let x = input.row(base + k);
            g_w.data_mut()[o * in_per + k] = dot(gy, x);
            let w = weight.at(o, k);
            for (gx, &g) in g_in.row_mut(base + k).iter_mut().zip(gy) {
                *gx += w * g;
            }
        }
    }
    ConvGrads {
        input: g_in,
        weight: g_w,
        bias: g_b,
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    // Four partial sums keep the reduction reasonably fast without
    // giving up a fixed evaluation order.
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for (j, s) in acc.iter_mut().enumerate() {
            *s += a[4 * i + j] * b[4 * i + j];
        }
    }
    let mut total = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        total += a[i] * b[i];
    }
    total
}

/// Index of the source channel feeding output channel `out` of a shuffle.
///
/// Channel `i·(C/g) + j` moves to position `j·g + i`.
pub fn shuffle_source(out: usize, channels: usize, groups: usize) -> usize {
    let per = channels / groups;
    let (j, i) = (out / groups, out % groups);
    i * per + j
}

pub fn channel_shuffle<T: Real>(input: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    require_2d("channel_shuffle", input)?;
    let c = input.rows();
    check_groups("channel_shuffle", c, groups)?;
    let mut out = Tensor::zeros(input.shape());
    for o in 0..c {
        out.row_mut(o)
            .copy_from_slice(input.row(shuffle_source(o, c, groups)));
    }
    Ok(out)
}

/// Gradient of [`channel_shuffle`]: the inverse permutation, which is a
/// shuffle with `C / groups` groups.
pub fn channel_shuffle_backward<T: Real>(grad_out: &Tensor<T>, groups: usize) -> Tensor<T> {
    let c = grad_out.rows();
    channel_shuffle(grad_out, c / groups).expect("shape checked in forward")
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

/// `input` is the pre-activation value seen by the forward pass.
pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = grad_out.clone();
    for (g, &x) in g.data_mut().iter_mut().zip(input.data()) {
        if x <= T::zero() {
            *g = T::zero();
        }
    }
    g
}

/// Running statistics and hyperparameters of a batch-norm layer. The
/// trainable scale and shift live in the [`ParamStore`](super::ParamStore).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::lit(0.1),
            eps: T::lit(1e-5),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Per-channel `(scale, shift)` of the inference-mode affine map.
    pub fn eval_affine(&self, gamma: &[T], beta: &[T]) -> (Vec<T>, Vec<T>) {
        let mut scale = Vec::with_capacity(gamma.len());
        let mut shift = Vec::with_capacity(gamma.len());
        for c in 0..gamma.len() {
            let s = gamma[c] / (self.running_var[c] + self.eps).sqrt();
            scale.push(s);
            shift.push(beta[c] - self.running_mean[c] * s);
        }
        (scale, shift)
    }

    pub fn cast<U: Real>(&self) -> BatchNormState<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64(x.to_f64().unwrap()).unwrap()).collect();
        BatchNormState {
            running_mean: conv(&self.running_mean),
            running_var: conv(&self.running_var),
            momentum: U::from_f64(self.momentum.to_f64().unwrap()).unwrap(),
            eps: U::from_f64(self.eps.to_f64().unwrap()).unwrap(),
        }
    }
}

/// Values the batch-norm backward pass needs.
#[derive(Debug, Clone)]
pub enum BatchNormCache<T> {
    Train { normalized: Tensor<T>, inv_std: Vec<T> },
    Eval { normalized: Tensor<T>, inv_std: Vec<T> },
}

/// Batch normalization over the column dimension.
///
/// In train mode the batch statistics normalize the input and update the
/// running estimates (unbiased variance); in eval mode the running estimates
/// define a fixed per-channel affine map.
pub fn batch_norm<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &mut BatchNormState<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    const OP: &str = "batch_norm";
    require_2d(OP, input)?;
    let (c, cols) = (input.rows(), input.cols());
    if gamma.len() != c || beta.len() != c || state.channels() != c {
        return Err(Error::shape(OP, format!("{c} channels vs gamma {:?}", gamma.shape())));
    }
    if cols == 0 {
        return Err(Error::Empty(OP));
    }
    let mut out = Tensor::zeros(input.shape());
    let mut normalized = Tensor::zeros(input.shape());
    let mut inv_std = Vec::with_capacity(c);
    match mode {
        Mode::Train => {
            let m = T::from_usize(cols).unwrap();
            for ch in 0..c {
                let x = input.row(ch);
                let mean = x.iter().copied().sum::<T>() / m;
                let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
                let inv = T::one() / (var + state.eps).sqrt();
                let (g, b) = (gamma.data()[ch], beta.data()[ch]);
                for ((xh, y), &v) in normalized
                    .row_mut(ch)
                    .iter_mut()
                    .zip(out.row_mut(ch).iter_mut())
                    .zip(x)
                {
                    *xh = (v - mean) * inv;
                    *y = g * *xh + b;
                }
                inv_std.push(inv);
                let unbiased = if cols > 1 {
                    var * m / (m - T::one())
                } else {
                    var
                };
                let mom = state.momentum;
                state.running_mean[ch] = (T::one() - mom) * state.running_mean[ch] + mom * mean;
                state.running_var[ch] = (T::one() - mom) * state.running_var[ch] + mom * unbiased;
            }
            Ok((out, BatchNormCache::Train { normalized, inv_std }))
        }
        Mode::Eval => {
            let (scale, shift) = state.eval_affine(gamma.data(), beta.data());
            for ch in 0..c {
                let inv = T::one() / (state.running_var[ch] + state.eps).sqrt();
                let mean = state.running_mean[ch];
                for ((xh, y), &v) in normalized
                    .row_mut(ch)
                    .iter_mut()
                    .zip(out.row_mut(ch).iter_mut())
                    .zip(input.row(ch))
                {
                    *xh = (v - mean) * inv;
                    *y = v * scale[ch] + shift[ch];
                }
                inv_std.push(inv);
            }
            Ok((out, BatchNormCache::Eval { normalized, inv_std }))
        }
    }
}

/// Batch norm in eval mode without recording anything for backward.
pub fn batch_norm_eval<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &BatchNormState<T>,
) -> Result<Tensor<T>> {
    let c = input.rows();
    if gamma.len() != c || beta.len() != c || state.channels() != c {
        return Err(Error::shape("batch_norm", format!("{c} channels vs gamma {:?}", gamma.shape())));
    }
    let (scale, shift) = state.eval_affine(gamma.data(), beta.data());
    let mut out = input.clone();
    for ch in 0..c {
        for y in out.row_mut(ch) {
            *y = *y * scale[ch] + shift[ch];
        }
    }
    Ok(out)
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batch_norm_backward<T: Real>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (c, cols) = (grad_out.rows(), grad_out.cols());
    let mut g_in = Tensor::zeros(grad_out.shape());
    let mut g_gamma = Tensor::zeros(&[c]);
    let mut g_beta = Tensor::zeros(&[c]);
    let (normalized, inv_std, train) = match cache {
        BatchNormCache::Train { normalized, inv_std } => (normalized, inv_std, true),
        BatchNormCache::Eval { normalized, inv_std } => (normalized, inv_std, false),
    };
    let m = T::from_usize(cols).unwrap();
    for ch in 0..c {
        let gy = grad_out.row(ch);
        let xh = normalized.row(ch);
        let sum_gy: T = gy.iter().copied().sum();
        let sum_gy_xh = dot(gy, xh);
        g_gamma.data_mut()[ch] = sum_gy_xh;
        g_beta.data_mut()[ch] = sum_gy;
        let g = gamma.data()[ch];
        let inv = inv_std[ch];
        let row = g_in.row_mut(ch);
        if train {
            let k = g * inv / m;
            for ((gx, &gyv), &xhv) in row.iter_mut().zip(gy).zip(xh) {
                *gx = k * (m * gyv - sum_gy - xhv * sum_gy_xh);
            }
        } else {
            for (gx, &gyv) in row.iter_mut().zip(gy) {
                *gx = g * inv * gyv;
            }
        }
    }
    (g_in, g_gamma, g_beta)
}

/// Inverted dropout: surviving entries are scaled by `1 / (1 - rate)` so
/// that eval mode is the identity. Returns the mask for backward (`None` in
/// eval mode).
pub fn dropout<T: Real, R: Rng + ?Sized>(
    input: &Tensor<T>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> (Tensor<T>, Option<Tensor<T>>) {
    if mode == Mode::Eval || rate <= 0.0 {
        return (input.clone(), None);
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let mask = input.map(|_| {
        if rng.random::<f64>() < rate {
            T::zero()
        } else {
            keep
        }
    });
    let mut out = input.clone();
    for (y, &k) in out.data_mut().iter_mut().zip(mask.data()) {
        *y *= k;
    }
    (out, Some(mask))
}

pub fn dropout_backward<T: Real>(mask: Option<&Tensor<T>>, grad_out: &Tensor<T>) -> Tensor<T> {
    match mask {
        None => grad_out.clone(),
        Some(mask) => {
            let mut g = grad_out.clone();
            for (g, &k) in g.data_mut().iter_mut().zip(mask.data()) {
                *g *= k;
            }
            g
        }
    }
}

/// Result of max pooling along the point dimension.
#[derive(Debug, Clone)]
pub struct Pooled<T> {
    /// `C × B` per-cloud channel maxima.
    pub values: Tensor<T>,
    /// For each `(channel, cloud)`, the point index (within its cloud) that
    /// attained the maximum. Ties resolve to the lowest index.
    pub argmax: Vec<usize>,
    pub points: usize,
}

impl<T: Real> Pooled<T> {
    pub fn argmax_of(&self, channel: usize, cloud: usize) -> usize {
        self.argmax[channel * self.values.cols() + cloud]
    }
}

/// Max pooling over consecutive blocks of `points` columns.
pub fn max_pool_points<T: Real>(input: &Tensor<T>, points: usize) -> Result<Pooled<T>> {
    const OP: &str = "max_pool_points";
    require_2d(OP, input)?;
    if points == 0 || input.cols() == 0 {
        return Err(Error::Empty(OP));
    }
    if input.cols() % points != 0 {
        return Err(Error::shape(
            OP,
            format!("{} columns is not a multiple of {points} points", input.cols()),
        ));
    }
    let (c, clouds) = (input.rows(), input.cols() / points);
    let mut values = Tensor::zeros(&[c, clouds]);
    let mut argmax = vec![0; c * clouds];
    for ch in 0..c {
        let row = input.row(ch);
        for b in 0..clouds {
            let seg = &row[b * points..(b + 1) * points];
            let mut best = 0;
            for (i, &v) in seg.iter().enumerate().skip(1) {
                if v > seg[best] {
                    best = i;
                }
            }
            values.row_mut(ch)[b] = seg[best];
            argmax[ch * clouds + b] = best;
        }
    }
    Ok(Pooled {
        values,
        argmax,
        points,
    })
}

/// Routes each pooled gradient to the argmax point of its channel; every
/// other position receives zero.
pub fn max_pool_backward<T: Real>(pooled: &Pooled<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let (c, clouds) = (pooled.values.rows(), pooled.values.cols());
    let p = pooled.points;
    let mut g = Tensor::zeros(&[c, clouds * p]);
    for ch in 0..c {
        let row = g.row_mut(ch);
        for b in 0..clouds {
            row[b * p + pooled.argmax[ch * clouds + b]] += grad_out.at(ch, b);
        }
    }
    g
}

/// `out[c, j] = factor · gain[c] · input[c, j]`.
pub fn scale_channels<T: Real>(input: &Tensor<T>, gain: &Tensor<T>, factor: T) -> Result<Tensor<T>> {
    require_2d("scale_channels", input)?;
    if gain.len() != input.rows() {
        return Err(Error::shape(
            "scale_channels",
            format!("gain of length {} for {} channels", gain.len(), input.rows()),
        ));
    }
    let mut out = input.clone();
    for ch in 0..input.rows() {
        let s = factor * gain.data()[ch];
        for y in out.row_mut(ch) {
            *y *= s;
        }
    }
    Ok(out)
}

/// Returns `(grad_input, grad_gain)`.
pub fn scale_channels_backward<T: Real>(
    input: &Tensor<T>,
    gain: &Tensor<T>,
    factor: T,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let c = input.rows();
    let mut g_in = grad_out.clone();
    let mut g_gain = Tensor::zeros(&[c]);
    for ch in 0..c {
        let s = factor * gain.data()[ch];
        for g in g_in.row_mut(ch) {
            *g *= s;
        }
        g_gain.data_mut()[ch] = factor * dot(grad_out.row(ch), input.row(ch));
    }
    (g_in, g_gain)
}

/// Softmax cross-entropy (natural log) of `K × B` logits against class labels.
#[derive(Debug, Clone)]
pub struct CrossEntropy<T> {
    /// Per-sample loss in nats.
    pub losses: Vec<T>,
    /// `K × B` softmax probabilities.
    pub probs: Tensor<T>,
}

impl<T: Real> CrossEntropy<T> {
    pub fn mean(&self) -> T {
        self.losses.iter().copied().sum::<T>() / T::from_usize(self.losses.len()).unwrap()
    }

    /// Gradient of `Σ_b weight · loss_b` with respect to the logits.
    pub fn backward(&self, labels: &[usize], weight: T) -> Tensor<T> {
        let mut g = self.probs.clone();
        let b = g.cols();
        for (j, &t) in labels.iter().enumerate() {
            g.data_mut()[t * b + j] -= T::one();
        }
        for v in g.data_mut() {
            *v *= weight;
        }
        g
    }
}

pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<CrossEntropy<T>> {
    require_2d("cross_entropy", logits)?;
    let (k, b) = (logits.rows(), logits.cols());
    if labels.len() != b {
        return Err(Error::Length {
            expected: b,
            got: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&t| t >= k) {
        return Err(Error::Config(format!("label {bad} out of range for {k} classes")));
    }
    let mut probs = Tensor::zeros(&[k, b]);
    let mut losses = Vec::with_capacity(b);
    for j in 0..b {
        let col = logits.column(j);
        let max = col.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = col.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        for (i, &z) in col.iter().enumerate() {
            probs.data_mut()[i * b + j] = (z - lse).exp();
        }
        losses.push(lse - col[labels[j]]);
    }
    Ok(CrossEntropy { losses, probs })
}

/// Index of the largest logit in each column (lowest index on ties).
pub fn argmax_columns<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    (0..logits.cols())
        .map(|j| {
            let mut best = 0;
            for i in 1..logits.rows() {
                if logits.at(i, j) > logits.at(best, j) {
                    best = i;
                }
            }
            best
        })
        .collect()
}
