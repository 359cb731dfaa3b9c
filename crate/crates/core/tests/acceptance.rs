//! Acceptance suite: one test per criterion, each printing a single
//! `criterion N [...]: PASS|FAIL|NOT RUN (...)` line.
//!
//! Run with `cargo test -p pccodec --test acceptance`; verdict lines bypass
//! output capture.
//! Criterion 6 trains on the packed ModelNet40 dataset named by
//! `PCCODEC_MODELNET40` and reports NOT RUN without it.

mod common;

use std::path::PathBuf;

use common::{not_run, perturbed_codec, random_cloud, rng, synthetic_dataset, verdict};
use pccodec::bitstream::{range_decode, range_encode, Bitstream, Model};
use pccodec::codec::{format_kilo_2sf, Codec, CodecConfig, ConfigName};
use pccodec::data::{read_dataset, PointCloud};
use pccodec::entropy::{build_tables, CodingTable, FactorizedPrior, LIKELIHOOD_FLOOR, PROB_TOTAL};
use pccodec::nn::gradcheck::{self, GradCheck};
use pccodec::nn::{self, Mode, ParamId, ParamStore, Tensor};
use pccodec::train::{bd_metrics, evaluate, train, RaPoint, TrainSpec, Trainer};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

// ---------------------------------------------------------------------------
// Pinned tolerances and budgets.

const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-6;
// Every parameter of the full graph moves at once; larger steps cross ReLU
// and max-pool kinks.
const CODEC_GRAD_STEP: f64 = 1e-7;
const GRAD_SHAPES: usize = 100;
const BN_MEAN_TOL: f64 = 1e-5;
const BN_VAR_TOL: f64 = 1e-4;

const INVARIANCE_CLOUDS: usize = 1000;

const CODER_TRIALS: usize = 10_000;
const CODER_OVERHEAD_BITS: f64 = 64.0;
const PAYLOAD_CLOUDS: usize = 100;

const TABLE_PROB_TOL: f64 = 1.0 / 32768.0 + 1e-4;
const MONOTONE_PAIRS: usize = 1000;
const PMF_SUM_TOL: f64 = 1e-4;

const SMOKE_EPOCHS: usize = 3;
const SMOKE_LOSS_DROP: f64 = 0.30;
const SMOKE_TOP1: f64 = 40.0;
const FULL_TOP1: f64 = 75.0;
const FULL_RATE_BITS: f64 = 100.0;
const FULL_EPOCHS: usize = 200;
const LAMBDA: f64 = 8000.0;

const OVERFIT_BATCH: usize = 32;
const OVERFIT_STEPS: u64 = 300;
const OVERFIT_CHECK_EVERY: u64 = 10;

const BD_EXACT_TOL: f64 = 0.01;
const BD_ORACLE_REL_TOL: f64 = 1e-3;
const BD_ORACLE_INTERVALS: usize = 100_000;

const CLASS_BOUND_BITS: f64 = 5.321_928_094_887_363; // log2(40)

const DATASET_ENV: &str = "PCCODEC_MODELNET40";
const BLESS_ENV: &str = "PCCODEC_BLESS";

// ---------------------------------------------------------------------------
// Criterion 1: MAC accounting.

#[test]
fn criterion_1_mac_accounting() {
    // Independent oracle: conv layers cost C_in·C_out/groups per point,
    // linear layers in·out.
    fn conv(layers: &[(usize, usize)]) -> usize {
        let mut c_in = 3;
        let mut total = 0;
        for &(c_out, g) in layers {
            total += c_in * c_out / g;
            c_in = c_out;
        }
        total
    }
    fn dense(n: usize) -> usize {
        n * 512 + 512 * 256 + 256 * 40
    }
    let expected = [
        (ConfigName::Full, conv(&[(64, 1), (64, 1), (64, 1), (128, 1), (1024, 1)]), dense(1024), "150k", "670k"),
        (ConfigName::Lite, conv(&[(8, 1), (8, 1), (16, 1), (16, 2), (32, 4)]), dense(32), "0.47k", "160k"),
        (ConfigName::Micro, conv(&[(16, 1)]), dense(16), "0.048k", "150k"),
    ];
    let mut failures = Vec::new();
    let mut shown = Vec::new();
    for (name, enc, dec, enc_s, dec_s) in expected {
        let m = CodecConfig::new(name, 1024).unwrap().mac_count();
        let got = (format_kilo_2sf(m.encoder_per_point), format_kilo_2sf(m.decoder));
        if m.encoder_per_point != enc || m.decoder != dec || got.0 != enc_s || got.1 != dec_s {
            failures.push(format!("{name}: {m:?} -> {got:?}"));
        }
        shown.push(format!("{name} {}/{}", got.0, got.1));
    }
    let detail = if failures.is_empty() { shown.join(", ") } else { failures.join("; ") };
    verdict("1", "MAC accounting", failures.is_empty(), detail);
}

// ---------------------------------------------------------------------------
// Criterion 2: gradient suite.

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn vector(rng: &mut ChaCha8Rng, len: usize) -> Tensor<f64> {
    Tensor::from_vec(&[len], (0..len).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Runs `GRAD_SHAPES` checks built by `case` and returns the worst one.
fn worst(seed: u64, mut case: impl FnMut(&mut ChaCha8Rng) -> GradCheck) -> GradCheck {
    let mut r = rng(seed);
    (0..GRAD_SHAPES)
        .map(|_| case(&mut r))
        .max_by(|a, b| a.rel_error().total_cmp(&b.rel_error()))
        .unwrap()
}

fn grad_conv(r: &mut ChaCha8Rng) -> GradCheck {
    let groups = r.random_range(1..=3);
    let c_in = groups * r.random_range(1..=4);
    let c_out = groups * r.random_range(1..=4);
    let cols = r.random_range(1..=12);
    let inputs = [normal(r, c_in, cols), normal(r, c_out, c_in / groups), vector(r, c_out)];
    gradcheck::check(
        &inputs,
        |t| nn::pointwise_conv(&t[0], &t[1], &t[2], groups).unwrap(),
        |t, g| {
            let c = nn::pointwise_conv_backward(&t[0], &t[1], groups, g);
            vec![c.input, c.weight, c.bias]
        },
        GRAD_STEP,
        r,
    )
}

fn grad_shuffle(r: &mut ChaCha8Rng) -> GradCheck {
    let groups = r.random_range(1..=4);
    let c = groups * r.random_range(1..=4);
    let cols = r.random_range(1..=6);
    let inputs = [normal(r, c, cols)];
    gradcheck::check(
        &inputs,
        |t| nn::channel_shuffle(&t[0], groups).unwrap(),
        |_, g| vec![nn::channel_shuffle_backward(g, groups)],
        GRAD_STEP,
        r,
    )
}

fn grad_relu(r: &mut ChaCha8Rng) -> GradCheck {
    let (rows, cols) = (r.random_range(1..=6), r.random_range(1..=10));
    let inputs = [normal(r, rows, cols)];
    gradcheck::check(
        &inputs,
        |t| nn::relu(&t[0]),
        |t, g| vec![nn::relu_backward(&t[0], g)],
        GRAD_STEP,
        r,
    )
}

fn grad_batch_norm(r: &mut ChaCha8Rng, mode: Mode) -> GradCheck {
    let c = r.random_range(1..=5);
    let cols = r.random_range(2..=12);
    let mut state = nn::BatchNormState::<f64>::new(c);
    for ch in 0..c {
        state.running_mean[ch] = r.sample(StandardNormal);
        state.running_var[ch] = r.random_range(0.2..3.0);
    }
    let inputs = [normal(r, c, cols), vector(r, c), vector(r, c)];
    let run = |t: &[Tensor<f64>]| nn::batch_norm(&t[0], &t[1], &t[2], &mut state.clone(), mode).unwrap();
    gradcheck::check(
        &inputs,
        |t| run(t).0,
        |t, g| {
            let (_, cache) = run(t);
            let (gx, gg, gb) = nn::batch_norm_backward(&cache, &t[1], g);
            vec![gx, gg, gb]
        },
        GRAD_STEP,
        r,
    )
}

fn grad_dropout(r: &mut ChaCha8Rng) -> GradCheck {
    let (rows, cols) = (r.random_range(1..=6), r.random_range(1..=10));
    let inputs = [normal(r, rows, cols)];
    let seed: u64 = r.random();
    let run = |t: &[Tensor<f64>]| nn::dropout(&t[0], 0.3, Mode::Train, &mut rng(seed));
    gradcheck::check(
        &inputs,
        |t| run(t).0,
        |t, g| vec![nn::dropout_backward(run(t).1.as_ref(), g)],
        GRAD_STEP,
        r,
    )
}

fn grad_max_pool(r: &mut ChaCha8Rng) -> GradCheck {
    let points = r.random_range(1..=6);
    let clouds = r.random_range(1..=4);
    let c = r.random_range(1..=5);
    let inputs = [normal(r, c, points * clouds)];
    gradcheck::check(
        &inputs,
        |t| nn::max_pool_points(&t[0], points).unwrap().values,
        |t, g| vec![nn::max_pool_backward(&nn::max_pool_points(&t[0], points).unwrap(), g)],
        GRAD_STEP,
        r,
    )
}

fn grad_scale(r: &mut ChaCha8Rng) -> GradCheck {
    let c = r.random_range(1..=6);
    let cols = r.random_range(1..=8);
    let inputs = [normal(r, c, cols), vector(r, c)];
    gradcheck::check(
        &inputs,
        |t| nn::scale_channels(&t[0], &t[1], 10.0).unwrap(),
        |t, g| {
            let (gx, gv) = nn::scale_channels_backward(&t[0], &t[1], 10.0, g);
            vec![gx, gv]
        },
        GRAD_STEP,
        r,
    )
}

fn grad_cross_entropy(r: &mut ChaCha8Rng) -> GradCheck {
    let k = r.random_range(2..=40);
    let b = r.random_range(1..=6);
    let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..k)).collect();
    let inputs = [normal(r, k, b).map(|v| 3.0 * v)];
    gradcheck::check(
        &inputs,
        |t| {
            let ce = nn::softmax_cross_entropy(&t[0], &labels).unwrap();
            Tensor::from_vec(&[b], ce.losses).unwrap()
        },
        |t, g| {
            // Per-sample cotangents: scale each column of dCE_b/dlogits.
            let ce = nn::softmax_cross_entropy(&t[0], &labels).unwrap();
            let mut grad = ce.backward(&labels, 1.0);
            for row in 0..k {
                for (j, v) in grad.row_mut(row).iter_mut().enumerate() {
                    *v *= g.data()[j];
                }
            }
            vec![grad]
        },
        GRAD_STEP,
        r,
    )
}

fn grad_prior(r: &mut ChaCha8Rng) -> GradCheck {
    let channels = r.random_range(1..=4);
    let cols = r.random_range(1..=5);
    let mut base = ParamStore::<f64>::new();
    let prior = FactorizedPrior::new(&mut base, "p", channels, r);
    let ids = prior.param_ids();
    let mut inputs = vec![normal(r, channels, cols).map(|v| 3.0 * v)];
    inputs.extend(ids.iter().map(|&id| base.value(id).map(|v| v + 0.3 * r.sample::<f64, _>(StandardNormal))));
    let build = |t: &[Tensor<f64>]| {
        let mut store = base.clone();
        for (&id, v) in ids.iter().zip(&t[1..]) {
            store.set_value(id, v.clone()).unwrap();
        }
        store
    };
    gradcheck::check(
        &inputs,
        |t| {
            let (rates, _) = prior.rate_batch(&mut build(t), &t[0], None).unwrap();
            Tensor::full(&[1], rates.iter().sum())
        },
        |t, g| {
            let mut store = build(t);
            store.zero_grad();
            let w = g.data()[0];
            let (_, gy) = prior.rate_batch(&mut store, &t[0], Some(w)).unwrap();
            let mut out = vec![gy.unwrap()];
            out.extend(ids.iter().map(|&id| store.grad(id).clone()));
            out
        },
        GRAD_STEP,
        r,
    )
}

fn grad_codec(r: &mut ChaCha8Rng, name: ConfigName) -> GradCheck {
    let points = r.random_range(2..=4);
    let batch = r.random_range(2..=3);
    let mut config = CodecConfig::new(name, points).unwrap();
    config.decoder = vec![r.random_range(4..=12), 40];
    let base = Codec::<f64>::new(config, r.random()).unwrap();
    let ids: Vec<ParamId> = base.params().ids().collect();
    let mut inputs = vec![normal(r, 3, points * batch)];
    inputs.extend(ids.iter().map(|&id| base.params().value(id).map(|v| v + 0.1 * r.sample::<f64, _>(StandardNormal))));
    let labels: Vec<usize> = (0..batch).map(|_| r.random_range(0..40)).collect();
    let seed: u64 = r.random();
    let build = |t: &[Tensor<f64>]| {
        let mut codec = base.clone();
        for (&id, v) in ids.iter().zip(&t[1..]) {
            codec.params_mut().set_value(id, v.clone()).unwrap();
        }
        codec
    };
    let run = |codec: &mut Codec<f64>, x: &Tensor<f64>| codec.forward_train(x, &labels, 3.0, &mut rng(seed)).unwrap();
    gradcheck::check(
        &inputs,
        |t| Tensor::full(&[1], run(&mut build(t), &t[0]).loss),
        |t, g| {
            let mut codec = build(t);
            codec.params_mut().zero_grad();
            let trace = run(&mut codec, &t[0]);
            let w = g.data()[0];
            let mut out = vec![codec.backward(&trace).unwrap().map(|v| v * w)];
            out.extend(ids.iter().map(|&id| codec.params().grad(id).map(|v| v * w)));
            out
        },
        CODEC_GRAD_STEP,
        r,
    )
}

/// Pre-affine train-mode batch norm output statistics.
fn batch_norm_moments() -> (f64, f64) {
    let mut r = rng(21);
    let (mut worst_mean, mut worst_var) = (0.0f64, 0.0f64);
    for _ in 0..GRAD_SHAPES {
        let c = r.random_range(1..=8);
        let cols = r.random_range(8..=64);
        let shift: f64 = r.random_range(-5.0..5.0);
        let x = normal(&mut r, c, cols).map(|v| 3.0 * v + shift);
        let ones = Tensor::full(&[c], 1.0);
        let zeros = Tensor::zeros(&[c]);
        let mut state = nn::BatchNormState::new(c);
        let (y, _) = nn::batch_norm(&x, &ones, &zeros, &mut state, Mode::Train).unwrap();
        for ch in 0..c {
            let row = y.row(ch);
            let m = row.iter().sum::<f64>() / cols as f64;
            let v = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / cols as f64;
            worst_mean = worst_mean.max(m.abs());
            // eps in the denominator shrinks the variance by var/(var+eps).
            worst_var = worst_var.max((v - 1.0).abs());
        }
    }
    (worst_mean, worst_var)
}

#[test]
fn criterion_2_gradient_suite() {
    let mut results: Vec<(&str, GradCheck)> = vec![
        ("pointwise_conv", worst(1, grad_conv)),
        ("channel_shuffle", worst(2, grad_shuffle)),
        ("relu", worst(3, grad_relu)),
        ("batch_norm/train", worst(4, |r| grad_batch_norm(r, Mode::Train))),
        ("batch_norm/eval", worst(5, |r| grad_batch_norm(r, Mode::Eval))),
        ("dropout", worst(6, grad_dropout)),
        ("max_pool_points", worst(7, grad_max_pool)),
        ("scale_channels", worst(8, grad_scale)),
        ("softmax_cross_entropy", worst(9, grad_cross_entropy)),
        ("prior_rate", worst(10, grad_prior)),
    ];
    let mut r = rng(11);
    let names = [ConfigName::Full, ConfigName::Lite, ConfigName::Micro];
    let codec = (0..GRAD_SHAPES)
        .map(|i| grad_codec(&mut r, names[i % 3]))
        .max_by(|a, b| a.rel_error().total_cmp(&b.rel_error()))
        .unwrap();
    results.push(("codec_loss", codec));

    let (bn_mean, bn_var) = batch_norm_moments();
    let failing: Vec<String> = results
        .iter()
        .filter(|(_, c)| !(c.rel_error() <= GRAD_REL_TOL))
        .map(|(n, c)| format!("{n} rel {:.2e}", c.rel_error()))
        .collect();
    let worst_rel = results.iter().map(|(_, c)| c.rel_error()).fold(0.0, f64::max);
    let bn_ok = bn_mean <= BN_MEAN_TOL && bn_var <= BN_VAR_TOL;
    let pass = failing.is_empty() && bn_ok;
    let detail = format!(
        "{} ops x {GRAD_SHAPES} shapes, worst rel {worst_rel:.2e} (tol {GRAD_REL_TOL:e}); \
         bn |mean| {bn_mean:.1e}, |var-1| {bn_var:.1e}{}",
        results.len(),
        if failing.is_empty() { String::new() } else { format!("; failing: {}", failing.join(", ")) }
    );
    verdict("2", "gradient suite", pass, detail);
}

// ---------------------------------------------------------------------------
// Criterion 3: permutation and critical-point invariants.

#[test]
fn criterion_3_invariants() {
    let mut failures = Vec::new();
    let mut largest = Vec::new();
    for (k, name) in ConfigName::ALL.into_iter().enumerate() {
        let model = Model::freeze(perturbed_codec(name, 1024, 30 + k as u64), LAMBDA as f32);
        let codec = &model.codec;
        let n = codec.latent_size();
        let mut r = rng(300 + k as u64);
        let mut max_set = 0;
        for i in 0..INVARIANCE_CLOUDS {
            let points = r.random_range(8..=64);
            let cloud = random_cloud(points, &mut r);
            let base = codec.analyze(&cloud).unwrap();

            let mut order: Vec<usize> = (0..points).collect();
            order.shuffle(&mut r);
            let permuted = codec.analyze(&cloud.select_columns(&order)).unwrap();
            if !bitwise_eq(&base.latent, &permuted.latent) {
                failures.push(format!("{name} cloud {i}: permutation changed the latent"));
            }

            let critical = codec.critical_points(&cloud).unwrap();
            max_set = max_set.max(critical.indices.len());
            if critical.indices.len() > n {
                failures.push(format!("{name} cloud {i}: {} critical points > N={n}", critical.indices.len()));
            }
            let subset = cloud.select_columns(&critical.indices);
            let reduced = codec.analyze(&subset).unwrap();
            if !bitwise_eq(&base.latent, &reduced.latent) {
                failures.push(format!("{name} cloud {i}: critical subset changed the latent"));
            }
            let full_stream = model.compress(&cloud).unwrap();
            let sub_stream = model.compress(&subset).unwrap();
            if full_stream.payload != sub_stream.payload {
                failures.push(format!("{name} cloud {i}: critical subset changed the payload"));
            }
        }
        largest.push(format!("{name} max |x_C| {max_set}/{n}"));
    }
    failures.truncate(5);
    let detail = format!(
        "{INVARIANCE_CLOUDS} clouds x 3 configs; {}{}",
        largest.join(", "),
        if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
    );
    verdict("3", "permutation/critical-point invariants", failures.is_empty(), detail);
}

fn bitwise_eq(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

// ---------------------------------------------------------------------------
// Criterion 4: coding correctness.

/// Table with positive integer frequencies summing to the probability total,
/// built without the library's quantizer.
fn random_table(r: &mut ChaCha8Rng) -> CodingTable {
    let support = r.random_range(1..=64usize);
    let symbols = support + 1;
    let skew: f64 = r.random_range(0.0..6.0);
    let weights: Vec<f64> = (0..symbols).map(|_| (skew * r.random::<f64>()).exp()).collect();
    let total: f64 = weights.iter().sum();
    let spare = (PROB_TOTAL as usize - symbols) as f64;
    let mut freqs: Vec<u32> = weights.iter().map(|w| 1 + (w / total * spare) as u32).collect();
    let short = PROB_TOTAL - freqs.iter().sum::<u32>();
    let top = (0..symbols).max_by_key(|&i| freqs[i]).unwrap();
    freqs[top] += short;
    let mut cdf = vec![0u32];
    for f in freqs {
        cdf.push(cdf.last().unwrap() + f);
    }
    CodingTable {
        min: r.random_range(-50..=50),
        cdf,
    }
}

fn random_value(r: &mut ChaCha8Rng, table: &CodingTable) -> i32 {
    match r.random_range(0..10) {
        0 => r.random(),
        1 => table.max() + r.random_range(1..1000),
        2 => table.min - r.random_range(1..1000),
        _ => table.value_of(r.random_range(0..table.support_len())),
    }
}

fn ideal_bits(values: &[i32], tables: &[CodingTable]) -> f64 {
    values.iter().enumerate().map(|(i, &v)| tables[i % tables.len()].cost_bits(v)).sum()
}

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Deterministic model whose coding tables back the golden vectors.
fn golden_model() -> Model {
    let codec = Codec::new(CodecConfig::new(ConfigName::Micro, 1024).unwrap(), 2024).unwrap();
    Model::freeze(codec, LAMBDA as f32)
}

fn golden_latent() -> Vec<i32> {
    vec![0, -1, 2, 5000, -3, 0, 1, -70000, 4, 0, 0, -2, 7, 1, i32::MIN, 3]
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Compares (or, with `PCCODEC_BLESS=1`, rewrites) the golden files.
fn golden_check() -> Result<String, String> {
    let model = golden_model();
    let latent = golden_latent();
    let payload = range_encode(&latent, &model.tables).map_err(|e| e.to_string())?;
    let stream = model.encode_latent(&latent, 1024).map_err(|e| e.to_string())?.to_bytes();
    let vectors = serde_json::json!({
        "config": "micro",
        "seed": 2024,
        "tables": model.tables.iter().map(|t| serde_json::json!({"min": t.min, "cdf": t.cdf})).collect::<Vec<_>>(),
        "latent": latent,
        "payload_hex": hex(&payload),
    });
    let json_path = golden_dir().join("range_vectors.json");
    let bin_path = golden_dir().join("stream_micro.bin");
    if std::env::var(BLESS_ENV).as_deref() == Ok("1") {
        std::fs::create_dir_all(golden_dir()).map_err(|e| e.to_string())?;
        std::fs::write(&json_path, serde_json::to_string_pretty(&vectors).unwrap() + "\n").map_err(|e| e.to_string())?;
        std::fs::write(&bin_path, &stream).map_err(|e| e.to_string())?;
        return Ok("golden files blessed".into());
    }
    let stored: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(&json_path).map_err(|e| format!("{}: {e} (bless with {BLESS_ENV}=1)", json_path.display()))?,
    )
    .map_err(|e| e.to_string())?;

    // The stored tables and values must encode to the stored bytes on their
    // own, independent of the model that produced them.
    let tables: Vec<CodingTable> = stored["tables"]
        .as_array()
        .ok_or("tables missing")?
        .iter()
        .map(|t| CodingTable {
            min: t["min"].as_i64().unwrap() as i32,
            cdf: t["cdf"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap() as u32).collect(),
        })
        .collect();
    let values: Vec<i32> = stored["latent"].as_array().ok_or("latent missing")?.iter().map(|v| v.as_i64().unwrap() as i32).collect();
    let stored_hex = stored["payload_hex"].as_str().ok_or("payload missing")?;
    let reencoded = range_encode(&values, &tables).map_err(|e| e.to_string())?;
    if hex(&reencoded) != stored_hex {
        return Err("stored tables and values no longer encode to the stored payload".into());
    }
    if range_decode(&reencoded, values.len(), &tables).map_err(|e| e.to_string())? != values {
        return Err("stored payload does not decode to the stored values".into());
    }
    if stored != vectors {
        return Err("freshly built tables or payload differ from range_vectors.json".into());
    }
    let stored_stream = std::fs::read(&bin_path).map_err(|e| format!("{}: {e}", bin_path.display()))?;
    if stored_stream != stream {
        return Err("stream bytes differ from stream_micro.bin".into());
    }
    let parsed = Bitstream::from_bytes(&stored_stream).map_err(|e| e.to_string())?;
    if model.decode_latent(&parsed).map_err(|e| e.to_string())? != latent {
        return Err("golden stream does not decode to the golden latent".into());
    }
    Ok(format!("golden payload {} bytes, stream {} bytes", reencoded.len(), stored_stream.len()))
}

#[test]
fn criterion_4_coding_correctness() {
    let mut failures = Vec::new();

    let mut r = rng(40);
    let mut worst_excess = f64::NEG_INFINITY;
    for trial in 0..CODER_TRIALS {
        let tables: Vec<CodingTable> = (0..r.random_range(1..=16)).map(|_| random_table(&mut r)).collect();
        let count = r.random_range(0..=64);
        let values: Vec<i32> = (0..count).map(|i| random_value(&mut r, &tables[i % tables.len()])).collect();
        let bytes = range_encode(&values, &tables).unwrap();
        match range_decode(&bytes, count, &tables) {
            Ok(back) if back == values => {}
            other => failures.push(format!("trial {trial}: round trip gave {other:?}")),
        }
        let excess = 8.0 * bytes.len() as f64 - ideal_bits(&values, &tables);
        worst_excess = worst_excess.max(excess);
        if !(-1e-6..=CODER_OVERHEAD_BITS).contains(&excess) {
            failures.push(format!("trial {trial}: {excess:.1} bits over the ideal length"));
        }
    }

    let mut worst_cloud = 0.0f64;
    for (k, name) in ConfigName::ALL.into_iter().enumerate() {
        let model = Model::freeze(perturbed_codec(name, 1024, 40 + k as u64), LAMBDA as f32);
        let mut r = rng(400 + k as u64);
        for _ in 0..PAYLOAD_CLOUDS {
            let cloud = random_cloud(r.random_range(8..=64), &mut r);
            let latent = model.quantized_latent(&cloud).unwrap();
            let stream = model.compress(&cloud).unwrap();
            let gap = (stream.payload_bits() as f64 - model.table_bits(&latent)).abs();
            worst_cloud = worst_cloud.max(gap);
            if gap > CODER_OVERHEAD_BITS {
                failures.push(format!("{name}: payload {} vs table {:.1} bits", stream.payload_bits(), model.table_bits(&latent)));
            }
            if model.decode_latent(&stream).unwrap() != latent {
                failures.push(format!("{name}: stream does not decode to the latent"));
            }
        }
    }

    let golden = golden_check();
    if let Err(e) = &golden {
        failures.push(format!("golden: {e}"));
    }
    failures.truncate(5);
    let detail = format!(
        "{CODER_TRIALS} random round trips, worst excess {worst_excess:.1} bits; \
         worst |payload-table| {worst_cloud:.1} bits (tol {CODER_OVERHEAD_BITS}); {}{}",
        golden.as_deref().unwrap_or("golden mismatch"),
        if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
    );
    verdict("4", "coding correctness", failures.is_empty(), detail);
}

// ---------------------------------------------------------------------------
// Criterion 5: entropy-model invariants.

/// A prior for `channels` channels with its parameters moved away from the
/// initialization.
fn perturbed_prior(channels: usize, seed: u64) -> (FactorizedPrior, ParamStore<f32>) {
    let mut r = rng(seed);
    let mut store = ParamStore::<f32>::new();
    let prior = FactorizedPrior::new(&mut store, "p", channels, &mut r);
    for id in prior.param_ids() {
        let v = store.value(id).map(|v| v + 0.5 * r.sample::<f32, _>(StandardNormal));
        store.set_value(id, v).unwrap();
    }
    (prior, store)
}

#[test]
fn criterion_5_entropy_invariants() {
    let mut failures = Vec::new();
    let mut worst_table_gap = 0.0f64;
    let mut worst_sum = 0.0f64;
    let mut channels_checked = 0;
    for (k, channels) in [16usize, 32, 1024].into_iter().enumerate() {
        let (prior, store) = perturbed_prior(channels, 50 + k as u64);
        let store64 = store.cast::<f64>();
        let mut r = rng(500 + k as u64);
        let tables = build_tables(&prior, &store);
        for ch in 0..channels {
            channels_checked += 1;
            // Monotonicity of the CDF.
            for _ in 0..MONOTONE_PAIRS {
                let a: f64 = r.random_range(-200.0..200.0);
                let b: f64 = a + r.random_range(0.0..50.0);
                if prior.cdf(&store64, ch, a) > prior.cdf(&store64, ch, b) {
                    failures.push(format!("channel {ch}: c({a}) > c({b})"));
                    break;
                }
            }
            // Telescoping mass bound.
            let mass: f64 = (-1000..=1000).map(|n| prior.bin_probability(&store64, ch, n as f64)).sum();
            worst_sum = worst_sum.max(mass - 1.0);
            if mass > 1.0 + PMF_SUM_TOL {
                failures.push(format!("channel {ch}: total mass {mass}"));
            }

            // Table normalization and agreement with the model.
            let t = &tables[ch];
            if let Err(e) = t.validate(ch) {
                failures.push(e.to_string());
            }
            if *t.cdf.last().unwrap() != PROB_TOTAL || t.cdf.windows(2).any(|w| w[1] <= w[0]) {
                failures.push(format!("channel {ch}: table not normalized and strictly increasing"));
            }
            for s in 0..t.support_len() {
                let model_p = f64::from(prior.bin_probability(&store, ch, t.value_of(s) as f32));
                let gap = (t.probability(s) - model_p).abs();
                worst_table_gap = worst_table_gap.max(gap);
                if gap > TABLE_PROB_TOL {
                    failures.push(format!("channel {ch} value {}: table {} vs model {model_p}", t.value_of(s), t.probability(s)));
                }
            }
        }

        // Likelihood floor: far tails clamp, nothing falls below the floor.
        let mut probe: Vec<f32> = (0..channels).map(|_| r.random_range(-30.0..30.0)).collect();
        probe[0] = 1e7;
        probe[channels - 1] = -1e7;
        let p = prior.likelihoods(&store, &probe).unwrap();
        if p.iter().any(|&q| !(f64::from(q) >= LIKELIHOOD_FLOOR as f32 as f64 && q <= 1.0)) {
            failures.push(format!("{channels} channels: likelihood outside [floor, 1]"));
        }
        if f64::from(p[0]) != LIKELIHOOD_FLOOR || f64::from(p[channels - 1]) != LIKELIHOOD_FLOOR {
            failures.push(format!("{channels} channels: far tails not clamped to the floor"));
        }
        if prior.rate_bits(&store, &probe).unwrap() < 0.0 {
            failures.push("negative rate".into());
        }
    }
    failures.truncate(5);
    let detail = format!(
        "{channels_checked} channels; worst table gap {worst_table_gap:.2e} (tol {TABLE_PROB_TOL:.2e}), \
         worst mass excess {worst_sum:.1e}{}",
        if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
    );
    verdict("5", "entropy-model invariants", failures.is_empty(), detail);
}

// ---------------------------------------------------------------------------
// Criteria 6 and 9: training.

#[test]
fn criterion_6_smoke_training() {
    let data = synthetic_dataset(1024, 20, 10, 6);
    let mut spec = TrainSpec::new(ConfigName::Micro, 1024, LAMBDA);
    spec.epochs = SMOKE_EPOCHS;
    spec.patience = SMOKE_EPOCHS;
    spec.seed = 6;
    let mut trainer = Trainer::new(spec).unwrap();
    let mut losses = Vec::new();
    trainer.fit(&data.train, &[], |rec| losses.push(rec.loss)).unwrap();
    let (first, last) = (losses[0], *losses.last().unwrap());
    let drop = 1.0 - last / first;
    let eval = evaluate(&trainer.best(), &data.test).unwrap();
    let pass = drop >= SMOKE_LOSS_DROP && eval.top1 >= SMOKE_TOP1;
    verdict(
        "6-smoke",
        "desk training, synthetic 40-class substitute",
        pass,
        format!(
            "{SMOKE_EPOCHS} epochs: loss {first:.1} -> {last:.1} ({:.0}% drop, need {:.0}%), \
             test top1 {:.1}% (need {SMOKE_TOP1}%), rate {:.1} bits/cloud",
            100.0 * drop,
            100.0 * SMOKE_LOSS_DROP,
            eval.top1,
            eval.rate_bits
        ),
    );
}

/// Full-dataset run; also decides criterion 9, which is stated in terms of
/// the rate this run reports.
#[test]
fn criterion_6_full_and_9_bound() {
    let Some(path) = std::env::var_os(DATASET_ENV) else {
        not_run("6", "desk training, ModelNet40 micro P=1024", format!("set {DATASET_ENV} to a packed dataset from `pccodec ingest`"));
        not_run("9", "rate within 10x of log2(40)", "depends on criterion 6");
        return;
    };
    let file = std::fs::File::open(&path).expect("open dataset");
    let data = read_dataset(std::io::BufReader::new(file)).expect("read dataset");
    let mut spec = TrainSpec::new(ConfigName::Micro, 1024, LAMBDA);
    spec.epochs = FULL_EPOCHS;
    let (model, summary) = train(&spec, &data.train, |_| {}).unwrap();
    let eval = evaluate(&model, &data.test).unwrap();
    verdict(
        "6",
        "desk training, ModelNet40 micro P=1024",
        eval.top1 >= FULL_TOP1 && eval.rate_bits <= FULL_RATE_BITS,
        format!(
            "top1 {:.1}% (need {FULL_TOP1}%), rate {:.1} bits (need <= {FULL_RATE_BITS}), best epoch {}",
            eval.top1, eval.rate_bits, summary.best_epoch
        ),
    );
    let upper = 10.0 * CLASS_BOUND_BITS;
    verdict(
        "9",
        "rate within 10x of log2(40)",
        (CLASS_BOUND_BITS..=upper).contains(&eval.rate_bits),
        format!("rate {:.1} bits vs [{CLASS_BOUND_BITS:.2}, {upper:.1}]", eval.rate_bits),
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: overfitting a single batch.

fn eval_accuracy(codec: &Codec<f32>, clouds: &[PointCloud]) -> usize {
    let mut frozen = codec.clone();
    frozen.set_mode(Mode::Eval);
    clouds
        .iter()
        .filter(|c| {
            let logits = frozen.classify(&c.to_tensor()).unwrap();
            let best = (0..logits.len()).max_by(|&a, &b| logits[a].total_cmp(&logits[b])).unwrap();
            best == c.label
        })
        .count()
}

/// Steps until the eval-mode model classifies the whole batch correctly.
fn overfit(name: ConfigName, points: usize) -> Option<u64> {
    let data = synthetic_dataset(points, 1, 0, 7);
    let batch: Vec<PointCloud> = data.train[..OVERFIT_BATCH].to_vec();
    let refs: Vec<&PointCloud> = batch.iter().collect();
    let mut spec = TrainSpec::new(name, points, LAMBDA);
    spec.seed = 7;
    let mut trainer = Trainer::new(spec).unwrap();
    while trainer.step_count() < OVERFIT_STEPS {
        trainer.train_step(&refs).unwrap();
        if trainer.step_count() % OVERFIT_CHECK_EVERY == 0 && eval_accuracy(trainer.codec(), &batch) == OVERFIT_BATCH {
            return Some(trainer.step_count());
        }
    }
    None
}

#[test]
fn criterion_7_overfit() {
    // The full encoder runs at P=128 here; P=1024 is the ignored test below.
    let runs = [(ConfigName::Micro, 1024), (ConfigName::Lite, 1024), (ConfigName::Full, 128)];
    let results: Vec<_> = runs.iter().map(|&(n, p)| (n, p, overfit(n, p))).collect();
    let pass = results.iter().all(|r| r.2.is_some());
    let detail = results
        .iter()
        .map(|(n, p, s)| match s {
            Some(s) => format!("{n} P={p}: 100% after {s} steps"),
            None => format!("{n} P={p}: not within {OVERFIT_STEPS} steps"),
        })
        .collect::<Vec<_>>()
        .join(", ");
    verdict("7", "overfit 32-cloud batch", pass, detail);
}

#[test]
#[ignore = "full encoder at P=1024 takes several minutes on one core"]
fn criterion_7_overfit_full_1024() {
    let steps = overfit(ConfigName::Full, 1024);
    verdict("7-full-1024", "overfit 32-cloud batch", steps.is_some(), format!("{steps:?} steps"));
}

// ---------------------------------------------------------------------------
// Criterion 8: BD metrics.

fn ra(rate: f64, acc: f64) -> RaPoint {
    RaPoint {
        config: "c".into(),
        points: 1024,
        lambda: 1.0,
        rate_bits: rate,
        top1: acc,
    }
}

fn eval_poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &k| acc * x + k)
}

/// Mean of `f − g` over `[lo, hi]` by the composite trapezoid rule.
fn trapezoid_mean(f: impl Fn(f64) -> f64, g: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let n = BD_ORACLE_INTERVALS;
    let h = (hi - lo) / n as f64;
    let d = |x: f64| f(x) - g(x);
    let inner: f64 = (1..n).map(|i| d(lo + i as f64 * h)).sum();
    (0.5 * (d(lo) + d(hi)) + inner) * h / (hi - lo)
}

fn rel_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

#[test]
fn criterion_8_bd_metrics() {
    let mut failures = Vec::new();
    let anchor = vec![ra(12.0, 40.0), ra(25.0, 61.0), ra(60.0, 74.0), ra(140.0, 80.0), ra(400.0, 82.5)];

    let same = bd_metrics(&anchor, &anchor).unwrap();
    if same.bd_rate != Some(0.0) || same.bd_acc != Some(0.0) {
        failures.push(format!("identical curves gave {same:?}"));
    }

    let halved: Vec<RaPoint> = anchor.iter().map(|p| ra(p.rate_bits / 2.0, p.top1)).collect();
    let doubled = bd_metrics(&halved, &anchor).unwrap();
    let halved_rate = doubled.bd_rate.unwrap_or(f64::NAN);
    if !((halved_rate + 50.0).abs() <= BD_EXACT_TOL) {
        failures.push(format!("doubled-rate anchor gave {halved_rate}%"));
    }

    // BD-rate: log10-rate curves are cubics in accuracy.
    let mut r = rng(80);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let ft = [r.random_range(0.5..1.5), 0.02, r.random_range(-2e-4..2e-4), 2e-6];
        let fa = [r.random_range(0.5..1.5), 0.025, r.random_range(-2e-4..2e-4), 1e-6];
        let (at, aa) = ([30.0, 45.0, 60.0, 72.0, 80.0], [35.0, 50.0, 62.0, 76.0, 84.0]);
        let test: Vec<RaPoint> = at.iter().map(|&a| ra(10f64.powf(eval_poly(&ft, a)), a)).collect();
        let anc: Vec<RaPoint> = aa.iter().map(|&a| ra(10f64.powf(eval_poly(&fa, a)), a)).collect();
        let oracle_mean = trapezoid_mean(|a| eval_poly(&ft, a), |a| eval_poly(&fa, a), 35.0, 80.0);
        let oracle = (10f64.powf(oracle_mean) - 1.0) * 100.0;
        let got = bd_metrics(&test, &anc).unwrap().bd_rate.unwrap();
        worst = worst.max(rel_gap(got, oracle));
        if rel_gap(got, oracle) > BD_ORACLE_REL_TOL {
            failures.push(format!("BD-rate {got} vs oracle {oracle}"));
        }

        // BD-acc: accuracy curves are cubics in log10 rate.
        let gt = [r.random_range(10.0..30.0), 30.0, r.random_range(-6.0..-2.0), 0.3];
        let ga = [r.random_range(10.0..30.0), 28.0, r.random_range(-6.0..-2.0), 0.2];
        let (lt, la) = ([0.8, 1.2, 1.6, 2.0, 2.4], [1.0, 1.3, 1.7, 2.2, 2.6]);
        let test: Vec<RaPoint> = lt.iter().map(|&l| ra(10f64.powf(l), eval_poly(&gt, l))).collect();
        let anc: Vec<RaPoint> = la.iter().map(|&l| ra(10f64.powf(l), eval_poly(&ga, l))).collect();
        let oracle = trapezoid_mean(|l| eval_poly(&gt, l), |l| eval_poly(&ga, l), 1.0, 2.4);
        let got = bd_metrics(&test, &anc).unwrap().bd_acc.unwrap();
        worst = worst.max(rel_gap(got, oracle));
        if rel_gap(got, oracle) > BD_ORACLE_REL_TOL {
            failures.push(format!("BD-acc {got} vs oracle {oracle}"));
        }
    }
    failures.truncate(5);
    let detail = format!(
        "identical {:?}/{:?}, halved-rate test {halved_rate:.6}%, worst oracle rel gap {worst:.1e} (tol {BD_ORACLE_REL_TOL:e}){}",
        same.bd_rate,
        same.bd_acc,
        if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
    );
    verdict("8", "BD metrics", failures.is_empty(), detail);
}
