//! Fixtures shared by the integration test targets.
#![allow(dead_code)]

use pccodec::codec::{Codec, CodecConfig, ConfigName, PRIOR_PREFIX};
use pccodec::data::{synthetic, Dataset};
use pccodec::nn::{Mode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_cloud<R: Rng>(points: usize, rng: &mut R) -> Tensor<f32> {
    Tensor::from_fn(3, points, |_, _| rng.sample::<f32, _>(StandardNormal))
}

/// Eval-mode codec with perturbed weights and running statistics gathered
/// from a few training passes, so that no symmetry of the initialization
/// survives.
pub fn perturbed_codec(name: ConfigName, points: usize, seed: u64) -> Codec<f32> {
    let mut r = rng(seed);
    let mut codec = Codec::new(CodecConfig::new(name, points).unwrap(), seed).unwrap();
    for p in codec.params_mut().iter_mut() {
        if !p.name.starts_with(PRIOR_PREFIX) {
            p.value = p.value.map(|v| v + 0.3 * r.sample::<f32, _>(StandardNormal));
        }
    }
    for _ in 0..3 {
        let x = random_cloud(4 * 8, &mut r);
        codec.forward_train(&x, &[0, 1, 2, 3], 100.0, &mut r).unwrap();
    }
    codec.set_mode(Mode::Eval);
    codec
}

/// Balanced 40-class synthetic dataset.
pub fn synthetic_dataset(points: usize, train_per_class: usize, test_per_class: usize, seed: u64) -> Dataset {
    synthetic::generate(40, train_per_class, test_per_class, points, seed)
}

/// Writes to the stderr handle directly, which the test harness does not
/// capture, so verdicts show up in plain `cargo test` output.
fn report(line: String) {
    use std::io::Write;
    let _ = writeln!(std::io::stderr(), "{line}");
}

/// Reports the verdict line of one criterion and fails the test on FAIL.
pub fn verdict(id: &str, name: &str, pass: bool, detail: impl std::fmt::Display) {
    let status = if pass { "PASS" } else { "FAIL" };
    report(format!("criterion {id} [{name}]: {status} ({detail})"));
    assert!(pass, "criterion {id} [{name}] failed: {detail}");
}

pub fn not_run(id: &str, name: &str, why: impl std::fmt::Display) {
    report(format!("criterion {id} [{name}]: NOT RUN ({why})"));
}
