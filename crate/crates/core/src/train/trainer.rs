use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bitstream::Model;
use crate::codec::{Codec, CodecConfig, ConfigName, POINT_COUNTS};
use crate::data::{batch_tensor, subsample, PointCloud};
use crate::error::{Error, Result};
use crate::nn::Adam;

use super::eval::{eval_metrics, Metrics};

/// Rate-accuracy trade-offs swept by default.
pub const LAMBDA_GRID: [f64; 8] = [10.0, 30.0, 100.0, 300.0, 1000.0, 3000.0, 8000.0, 16000.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub config: ConfigName,
    pub points: usize,
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Share of the training clouds held out for early stopping.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl TrainSpec {
    pub fn new(config: ConfigName, points: usize, lambda: f64) -> Self {
        TrainSpec {
            config,
            points,
            lambda,
            lr: 1e-3,
            batch_size: 32,
            epochs: 200,
            patience: 20,
            validation_fraction: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !POINT_COUNTS.contains(&self.points) {
            return Err(Error::Config(format!(
                "point count {} is not one of {POINT_COUNTS:?}",
                self.points
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Independent random stream `k` of a global seed.
pub(crate) fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_SPLIT: u64 = 4;

/// One line of the training log. Epoch 0 describes the untrained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    /// Mean training-mode loss over the epoch's batches.
    pub loss: f64,
    /// Mean estimated bits per cloud over the epoch's batches.
    pub rate: f64,
    /// Training-mode top-1 accuracy in percent.
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub stopped_early: bool,
}

/// Holds the model under training and the best snapshot seen so far.
///
/// On divergence the failing update is discarded and [`Trainer::best`]
/// still holds the last good model.
#[derive(Debug, Clone)]
pub struct Trainer {
    spec: TrainSpec,
    codec: Codec<f32>,
    best: Codec<f32>,
    best_epoch: usize,
    adam: Adam,
    shuffle_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    step: u64,
    epoch: usize,
}

#[derive(Default)]
struct Totals {
    loss: f64,
    rate: f64,
    correct: usize,
    clouds: usize,
}

impl Trainer {
    pub fn new(spec: TrainSpec) -> Result<Self> {
        spec.validate()?;
        let config = CodecConfig::new(spec.config, spec.points)?;
        let init_seed = rand::Rng::random(&mut stream(spec.seed, STREAM_INIT));
        let codec = Codec::new(config, init_seed)?;
        Ok(Trainer {
            adam: Adam::new(spec.lr),
            shuffle_rng: stream(spec.seed, STREAM_SHUFFLE),
            noise_rng: stream(spec.seed, STREAM_NOISE),
            best: codec.clone(),
            best_epoch: 0,
            codec,
            spec,
            step: 0,
            epoch: 0,
        })
    }

    pub fn spec(&self) -> &TrainSpec {
        &self.spec
    }

    pub fn codec(&self) -> &Codec<f32> {
        &self.codec
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// The best model so far, frozen with coding tables.
    pub fn best(&self) -> Model {
        Model::freeze(self.best.clone(), self.spec.lambda as f32)
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    fn batch(&mut self, clouds: &[&PointCloud]) -> Result<crate::nn::Tensor<f32>> {
        let p = self.spec.points;
        let mut owned = Vec::with_capacity(clouds.len());
        for c in clouds {
            if c.len() < p {
                return Err(Error::Config(format!(
                    "cloud `{}` has {} points, training needs {p}",
                    c.source,
                    c.len()
                )));
            }
            owned.push(if c.len() == p {
                (*c).clone()
            } else {
                subsample(c, p, rand::Rng::random(&mut self.shuffle_rng))?
            });
        }
        let refs: Vec<&PointCloud> = owned.iter().collect();
        Ok(batch_tensor(&refs))
    }

    fn diverged(&self, what: String) -> Error {
        Error::Diverged {
            epoch: self.epoch,
            step: self.step,
            lambda: self.spec.lambda,
            what,
        }
    }

    /// One optimizer step on a batch. Returns `(loss, rate, correct)`.
    pub fn train_step(&mut self, clouds: &[&PointCloud]) -> Result<(f64, f64, usize)> {
        let x = self.batch(clouds)?;
        let labels: Vec<usize> = clouds.iter().map(|c| c.label).collect();
        let snapshot = self.codec.clone();
        self.codec.params_mut().zero_grad();
        let lambda = self.spec.lambda as f32;
        let trace = self.codec.forward_train(&x, &labels, lambda, &mut self.noise_rng)?;
        if !trace.loss.is_finite() {
            self.codec = snapshot;
            return Err(self.diverged(format!("loss is {}", trace.loss)));
        }
        self.codec.backward(&trace)?;
        if let Err(e) = self.adam.step(self.codec.params_mut()) {
            self.codec = snapshot;
            return Err(self.diverged(e.to_string()));
        }
        self.step += 1;
        Ok((f64::from(trace.loss), f64::from(trace.rate), trace.correct()))
    }

    fn batches(&mut self, n: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.shuffle_rng);
        order.chunks(self.spec.batch_size).map(<[usize]>::to_vec).collect()
    }

    fn record(&self, t: &Totals, batches: usize, val: Option<Metrics>) -> LogRecord {
        LogRecord {
            step: self.step,
            epoch: self.epoch,
            loss: t.loss / batches as f64,
            rate: t.rate / batches as f64,
            accuracy: 100.0 * t.correct as f64 / t.clouds as f64,
            val_loss: val.map(|m| m.loss),
            val_rate: val.map(|m| m.rate),
            val_accuracy: val.map(|m| m.accuracy),
        }
    }

    /// Training-mode loss of the current model over all training batches,
    /// without changing it.
    pub fn probe(&mut self, train: &[PointCloud]) -> Result<LogRecord> {
        let mut scratch = self.codec.clone();
        let mut noise = stream(self.spec.seed, STREAM_NOISE);
        let batches = self.batches(train.len());
        let mut t = Totals::default();
        for idx in &batches {
            let refs: Vec<&PointCloud> = idx.iter().map(|&i| &train[i]).collect();
            let x = self.batch(&refs)?;
            let labels: Vec<usize> = refs.iter().map(|c| c.label).collect();
            let trace = scratch.forward_train(&x, &labels, self.spec.lambda as f32, &mut noise)?;
            t.loss += f64::from(trace.loss);
            t.rate += f64::from(trace.rate);
            t.correct += trace.correct();
            t.clouds += refs.len();
        }
        Ok(self.record(&t, batches.len(), None))
    }

    /// Runs one epoch and returns its log record (without validation).
    pub fn run_epoch(&mut self, train: &[PointCloud]) -> Result<LogRecord> {
        if train.is_empty() {
            return Err(Error::Empty("training set"));
        }
        self.epoch += 1;
        let batches = self.batches(train.len());
        let mut t = Totals::default();
        for idx in &batches {
            let refs: Vec<&PointCloud> = idx.iter().map(|&i| &train[i]).collect();
            let (loss, rate, correct) = self.train_step(&refs)?;
            t.loss += loss;
            t.rate += rate;
            t.correct += correct;
            t.clouds += refs.len();
        }
        Ok(self.record(&t, batches.len(), None))
    }

    fn validate_model(&self, val: &[PointCloud]) -> Result<Option<Metrics>> {
        if val.is_empty() {
            return Ok(None);
        }
        let mut frozen = self.codec.clone();
        frozen.set_mode(crate::nn::Mode::Eval);
        eval_metrics(&frozen, val, self.spec.lambda).map(Some)
    }

    /// Trains with early stopping on `val` (or on the training loss when
    /// `val` is empty). `sink` receives the epoch-0 record and one record
    /// per epoch.
    pub fn fit(
        &mut self,
        train: &[PointCloud],
        val: &[PointCloud],
        mut sink: impl FnMut(&LogRecord),
    ) -> Result<FitSummary> {
        let mut first = self.probe(train)?;
        let v0 = self.validate_model(val)?;
        first.val_loss = v0.map(|m| m.loss);
        first.val_rate = v0.map(|m| m.rate);
        first.val_accuracy = v0.map(|m| m.accuracy);
        sink(&first);
        let mut best_loss = first.val_loss.unwrap_or(first.loss);
        let mut since_best = 0;
        let mut stopped_early = false;
        while self.epoch < self.spec.epochs {
            let mut rec = self.run_epoch(train)?;
            let v = self.validate_model(val)?;
            rec.val_loss = v.map(|m| m.loss);
            rec.val_rate = v.map(|m| m.rate);
            rec.val_accuracy = v.map(|m| m.accuracy);
            sink(&rec);
            let score = rec.val_loss.unwrap_or(rec.loss);
            if score < best_loss {
                best_loss = score;
                since_best = 0;
                self.best = self.codec.clone();
                self.best_epoch = self.epoch;
            } else {
                since_best += 1;
                if since_best >= self.spec.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
        Ok(FitSummary {
            epochs_run: self.epoch,
            best_epoch: self.best_epoch,
            best_loss,
            stopped_early,
        })
    }
}

/// Splits training clouds into a training and a validation part with the
/// spec's seed.
pub fn validation_split(spec: &TrainSpec, clouds: &[PointCloud]) -> (Vec<PointCloud>, Vec<PointCloud>) {
    let mut order: Vec<usize> = (0..clouds.len()).collect();
    order.shuffle(&mut stream(spec.seed, STREAM_SPLIT));
    let n_val = if clouds.len() < 2 {
        0
    } else {
        ((clouds.len() as f64 * spec.validation_fraction).round() as usize).min(clouds.len() - 1)
    };
    let (val, train) = order.split_at(n_val);
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| clouds[i].clone()).collect()
    };
    (pick(train), pick(val))
}

/// Trains a model from `spec` on the training clouds, holding out a
/// validation slice, and returns the best model with its summary.
pub fn train(
    spec: &TrainSpec,
    clouds: &[PointCloud],
    sink: impl FnMut(&LogRecord),
) -> Result<(Model, FitSummary)> {
    let (train, val) = validation_split(spec, clouds);
    let mut trainer = Trainer::new(spec.clone())?;
    let summary = trainer.fit(&train, &val, sink)?;
    Ok((trainer.best(), summary))
}
