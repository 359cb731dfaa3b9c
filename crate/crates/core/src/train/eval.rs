use rayon::prelude::*;
use serde::Serialize;

use crate::bitstream::{Bitstream, Model};
use crate::codec::Codec;
use crate::data::{batch_tensor, subsample, PointCloud};
use crate::entropy::quantize;
use crate::error::{Error, Result};
use crate::nn::{argmax_columns, softmax_cross_entropy, Tensor};

use super::worker_pool;

const EVAL_BATCH: usize = 64;

/// Cloud reduced to `points` points. Larger clouds are subsampled with a
/// seed derived from `index`, so repeated evaluations agree.
pub(crate) fn fit_points(cloud: &PointCloud, points: usize, index: usize) -> Result<PointCloud> {
    match cloud.len() {
        n if n == points => Ok(cloud.clone()),
        n if n > points => subsample(cloud, points, index as u64),
        n => Err(Error::Config(format!(
            "cloud `{}` has {n} points, the model needs {points}",
            cloud.source
        ))),
    }
}

/// Eval-mode loss terms with the rate estimated from model likelihoods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub loss: f64,
    /// Mean estimated bits per cloud.
    pub rate: f64,
    /// Top-1 accuracy in percent.
    pub accuracy: f64,
}

pub fn eval_metrics(codec: &Codec<f32>, clouds: &[PointCloud], lambda: f64) -> Result<Metrics> {
    if clouds.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let points = codec.config().points;
    let fitted = clouds
        .iter()
        .enumerate()
        .map(|(i, c)| fit_points(c, points, i))
        .collect::<Result<Vec<_>>>()?;
    let prior = codec.prior();
    let (mut rate, mut ce, mut correct) = (0.0, 0.0, 0usize);
    for chunk in fitted.chunks(EVAL_BATCH) {
        let refs: Vec<&PointCloud> = chunk.iter().collect();
        let (y, _) = codec.analyze_batch(&batch_tensor(&refs), points)?;
        let q = Tensor::from_vec(
            y.shape(),
            quantize(y.data()).into_iter().map(|v| v as f32).collect(),
        )?;
        for b in 0..q.cols() {
            rate += f64::from(prior.rate_bits(codec.params(), &q.column(b))?);
        }
        let logits = codec.synthesize_batch(&q)?;
        let labels: Vec<usize> = chunk.iter().map(|c| c.label).collect();
        ce += softmax_cross_entropy(&logits, &labels)?
            .losses
            .iter()
            .map(|&l| f64::from(l))
            .sum::<f64>();
        correct += argmax_columns(&logits).iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    let n = clouds.len() as f64;
    Ok(Metrics {
        loss: rate / n + lambda * ce / n,
        rate: rate / n,
        accuracy: 100.0 * correct as f64 / n,
    })
}

/// Rate-accuracy of a frozen model measured on real streams.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    pub clouds: usize,
    /// Mean payload bits per cloud.
    pub rate_bits: f64,
    /// Mean likelihood-based rate estimate per cloud.
    pub estimated_bits: f64,
    /// Top-1 accuracy in percent.
    pub top1: f64,
}

/// Compresses, serializes, parses and decodes every cloud; the rate is the
/// mean payload size. Runs on the worker pool.
pub fn evaluate(model: &Model, clouds: &[PointCloud]) -> Result<Evaluation> {
    if clouds.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let points = model.codec.config().points;
    let per_cloud = worker_pool()?.install(|| {
        clouds
            .par_iter()
            .enumerate()
            .map(|(i, c)| -> Result<(usize, f64, bool)> {
                let x = fit_points(c, points, i)?.to_tensor::<f32>();
                let stream = model.compress(&x)?;
                let parsed = Bitstream::from_bytes(&stream.to_bytes())?;
                let q = model.decode_latent(&parsed)?;
                let qf: Vec<f32> = q.iter().map(|&v| v as f32).collect();
                let estimate = model.codec.prior().rate_bits(model.codec.params(), &qf)?;
                let logits = model.codec.synthesize(&qf)?;
                let pred = argmax_columns(&Tensor::from_vec(&[logits.len(), 1], logits)?)[0];
                Ok((parsed.payload_bits(), f64::from(estimate), pred == c.label))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let n = clouds.len() as f64;
    Ok(Evaluation {
        clouds: clouds.len(),
        rate_bits: per_cloud.iter().map(|r| r.0 as f64).sum::<f64>() / n,
        estimated_bits: per_cloud.iter().map(|r| r.1).sum::<f64>() / n,
        top1: 100.0 * per_cloud.iter().filter(|r| r.2).count() as f64 / n,
    })
}
