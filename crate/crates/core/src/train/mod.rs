//! Rate-accuracy training, evaluation on real streams, Pareto fronts,
//! Bjøntegaard-Delta metrics and the reconstruction probe.

mod bd;
mod eval;
mod ra;
mod recon;
mod trainer;

pub use bd::{bd_metrics, poly_integral, polyfit, BdReport, MIN_POINTS};
pub use eval::{eval_metrics, evaluate, Evaluation, Metrics};
pub use ra::{pareto_front, read_ra_csv, write_ra_csv, RaPoint};
pub use recon::{chamfer, recon_chamfer, train_recon, ReconEpoch, ReconNet, ReconSpec, RECON_MAGIC};
pub use trainer::{train, validation_split, FitSummary, LogRecord, TrainSpec, Trainer, LAMBDA_GRID};

use crate::error::{Error, Result};

/// Environment variable capping the worker threads of parallel evaluation.
pub const THREADS_ENV: &str = "PCCODEC_THREADS";

/// Thread count from `PCCODEC_THREADS`, or rayon's default when unset.
pub fn worker_threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        Err(_) => Ok(rayon::current_num_threads()),
    }
}

pub(crate) fn worker_pool() -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads()?)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// `R + λ · CE(label, softmax(logits))` for one sample; CE in nats.
pub fn loss(logits: &[f32], label: usize, rate_bits: f64, lambda: f64) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Length {
            expected: logits.len(),
            got: label,
        });
    }
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = max + logits.iter().map(|&l| (f64::from(l) - max).exp()).sum::<f64>().ln();
    let ce = lse - f64::from(logits[label]);
    let total = rate_bits + lambda * ce;
    if !total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss with rate {rate_bits}, lambda {lambda} and logits containing non-finite values"
        )));
    }
    Ok(total)
}
