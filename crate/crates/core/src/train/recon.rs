//! Point reconstruction from a frozen codec's quantized latent, trained
//! with the Chamfer distance.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{Reader, Writer};
use crate::bitstream::Model;
use crate::data::PointCloud;
use crate::error::{Error, Result};
use crate::nn::{linear, pointwise_conv_backward, relu, relu_backward, Adam, ParamId, ParamStore, Tensor};

pub const RECON_MAGIC: &[u8; 4] = b"PCRN";

fn nearest(p: [f32; 3], set: &[[f32; 3]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, q) in set.iter().enumerate() {
        let d: f64 = (0..3).map(|k| (f64::from(p[k]) - f64::from(q[k])).powi(2)).sum();
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Symmetric Chamfer distance: mean squared distance from each point of
/// `a` to its nearest neighbour in `b`, plus the same from `b` to `a`.
pub fn chamfer(a: &[[f32; 3]], b: &[[f32; 3]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("point set"));
    }
    let ab: f64 = a.iter().map(|&p| nearest(p, b).1).sum::<f64>() / a.len() as f64;
    let ba: f64 = b.iter().map(|&q| nearest(q, a).1).sum::<f64>() / b.len() as f64;
    Ok(ab + ba)
}

/// Chamfer distance and its gradient with respect to `pred`.
fn chamfer_grad(pred: &[[f32; 3]], target: &[[f32; 3]]) -> (f64, Vec<[f32; 3]>) {
    let mut grad = vec![[0.0f32; 3]; pred.len()];
    let (np, nt) = (pred.len() as f64, target.len() as f64);
    let mut loss = 0.0;
    for (i, &p) in pred.iter().enumerate() {
        let (j, d) = nearest(p, target);
        loss += d / np;
        for k in 0..3 {
            grad[i][k] += (2.0 * (f64::from(p[k]) - f64::from(target[j][k])) / np) as f32;
        }
    }
    for &q in target {
        let (i, d) = nearest(q, pred);
        loss += d / nt;
        for k in 0..3 {
            grad[i][k] += (2.0 * (f64::from(pred[i][k]) - f64::from(q[k])) / nt) as f32;
        }
    }
    (loss, grad)
}

#[derive(Debug, Clone)]
pub struct ReconSpec {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ReconSpec {
    fn default() -> Self {
        ReconSpec {
            hidden: 256,
            epochs: 50,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ReconEpoch {
    pub epoch: usize,
    pub train_chamfer: f64,
    pub test_chamfer: f64,
}

/// MLP `ŷ → P × 3`: two hidden ReLU layers and a linear output.
#[derive(Debug, Clone)]
pub struct ReconNet {
    latent: usize,
    points: usize,
    params: ParamStore<f32>,
    layers: Vec<(ParamId, ParamId)>,
}

impl ReconNet {
    pub fn new(latent: usize, points: usize, hidden: usize, seed: u64) -> Result<Self> {
        if latent == 0 || points == 0 || hidden == 0 {
            return Err(Error::Config("reconstruction sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let sizes = [latent, hidden, hidden, 3 * points];
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let bound = (6.0 / w[0] as f64).sqrt() as f32;
                let weight = Tensor::from_fn(w[1], w[0], |_, _| rng.random_range(-bound..bound));
                (
                    params.add(format!("recon.{i}.weight"), weight),
                    params.add(format!("recon.{i}.bias"), Tensor::zeros(&[w[1]])),
                )
            })
            .collect();
        Ok(ReconNet {
            latent,
            points,
            params,
            layers,
        })
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn latent(&self) -> usize {
        self.latent
    }

    /// Returns the layer inputs (for backward) and the `3P × B` output.
    fn forward_cached(&self, latents: &Tensor<f32>) -> Result<(Vec<Tensor<f32>>, Tensor<f32>)> {
        if latents.rows() != self.latent {
            return Err(Error::Length {
                expected: self.latent,
                got: latents.rows(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = latents.clone();
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = linear(&h, self.params.value(w), self.params.value(b))?;
            inputs.push(std::mem::replace(&mut h, z));
            if i + 1 < self.layers.len() {
                h = relu(&h);
            }
        }
        Ok((inputs, h))
    }

    fn column_points(out: &Tensor<f32>, col: usize) -> Vec<[f32; 3]> {
        out.column(col).chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
    }

    pub fn reconstruct(&self, latent: &[f32]) -> Result<Vec<[f32; 3]>> {
        let t = Tensor::from_vec(&[latent.len(), 1], latent.to_vec())?;
        Ok(Self::column_points(&self.forward_cached(&t)?.1, 0))
    }

    /// One Adam step on a batch; returns the mean Chamfer distance.
    fn step(&mut self, latents: &Tensor<f32>, targets: &[&[[f32; 3]]], adam: &Adam) -> Result<f64> {
        let (inputs, out) = self.forward_cached(latents)?;
        let b = targets.len();
        let mut g = Tensor::zeros(out.shape());
        let mut total = 0.0;
        for (col, target) in targets.iter().enumerate() {
            let (loss, grad) = chamfer_grad(&Self::column_points(&out, col), target);
            total += loss;
            for (i, gp) in grad.iter().enumerate() {
                for k in 0..3 {
                    g.data_mut()[(3 * i + k) * b + col] = gp[k] / b as f32;
                }
            }
        }
        self.params.zero_grad();
        for (i, &(w, bias)) in self.layers.iter().enumerate().rev() {
            if i + 1 < self.layers.len() {
                g = relu_backward(&inputs[i + 1], &g);
            }
            let grads = pointwise_conv_backward(&inputs[i], self.params.value(w), 1, &g);
            self.params.accumulate(w, &grads.weight);
            self.params.accumulate(bias, &grads.bias);
            g = grads.input;
        }
        adam.step(&mut self.params)?;
        Ok(total / b as f64)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.0.extend_from_slice(RECON_MAGIC);
        w.u32(self.latent as u32);
        w.u32(self.points as u32);
        w.u32(self.params.value(self.layers[0].0).rows() as u32);
        for p in self.params.iter() {
            w.f32s(p.value.data());
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != RECON_MAGIC {
            return Err(Error::format("not a reconstruction network (bad magic)"));
        }
        let latent = r.u32()? as usize;
        let points = r.u32()? as usize;
        let hidden = r.u32()? as usize;
        let mut net = ReconNet::new(latent, points, hidden, 0)?;
        let ids: Vec<ParamId> = net.params.ids().collect();
        for id in ids {
            let shape = net.params.value(id).shape().to_vec();
            let values = r.f32s(shape.iter().product())?;
            net.params.set_value(id, Tensor::from_vec(&shape, values)?)?;
        }
        if !r.is_done() {
            return Err(Error::format("trailing bytes after reconstruction network"));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn latents_of(model: &Model, clouds: &[PointCloud]) -> Result<Vec<Vec<f32>>> {
    clouds
        .iter()
        .map(|c| Ok(model.quantized_latent(&c.to_tensor())?.into_iter().map(|v| v as f32).collect()))
        .collect()
}

fn batch_latents(latents: &[&Vec<f32>]) -> Tensor<f32> {
    Tensor::from_fn(latents[0].len(), latents.len(), |r, c| latents[c][r])
}

/// Mean Chamfer distance between clouds and their reconstructions.
pub fn recon_chamfer(net: &ReconNet, model: &Model, clouds: &[PointCloud]) -> Result<f64> {
    if clouds.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let latents = latents_of(model, clouds)?;
    let mut total = 0.0;
    for (l, c) in latents.iter().zip(clouds) {
        total += chamfer(&net.reconstruct(l)?, &c.points)?;
    }
    Ok(total / clouds.len() as f64)
}

/// Trains a reconstruction network on the quantized latents of a frozen
/// model. `sink` receives one record per epoch, epoch 0 being the
/// untrained network.
pub fn train_recon(
    model: &Model,
    train: &[PointCloud],
    test: &[PointCloud],
    spec: &ReconSpec,
    mut sink: impl FnMut(&ReconEpoch),
) -> Result<ReconNet> {
    let first = train.first().ok_or(Error::Empty("training set"))?;
    let mut net = ReconNet::new(model.codec.latent_size(), first.len(), spec.hidden, spec.seed)?;
    let latents = latents_of(model, train)?;
    let adam = Adam::new(spec.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let train_eval = |net: &ReconNet| recon_chamfer(net, model, train);
    sink(&ReconEpoch {
        epoch: 0,
        train_chamfer: train_eval(&net)?,
        test_chamfer: if test.is_empty() { f64::NAN } else { recon_chamfer(&net, model, test)? },
    });
    for epoch in 1..=spec.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(spec.batch_size.max(1)) {
            let ls: Vec<&Vec<f32>> = chunk.iter().map(|&i| &latents[i]).collect();
            let ts: Vec<&[[f32; 3]]> = chunk.iter().map(|&i| train[i].points.as_slice()).collect();
            total += net.step(&batch_latents(&ls), &ts, &adam)?;
            batches += 1;
        }
        sink(&ReconEpoch {
            epoch,
            train_chamfer: total / batches as f64,
            test_chamfer: if test.is_empty() { f64::NAN } else { recon_chamfer(&net, model, test)? },
        });
    }
    Ok(net)
}
