//! `pccodec`: dataset preparation, training, coding and analysis of the
//! learned point cloud codec. Results go to stdout as JSON or to files as
//! CSV/JSON lines; diagnostics go to stderr.

mod settings;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use rayon::prelude::*;
use serde_json::json;

use pccodec::bitstream::{Bitstream, Model};
use pccodec::codec::{format_kilo_2sf, CodecConfig, ConfigName};
use pccodec::data::{self, Dataset, PointCloud, Split};
use pccodec::nn::{argmax_columns, Tensor};
use pccodec::train::{self, RaPoint, ReconNet, ReconSpec, TrainSpec};

#[derive(Parser)]
#[command(name = "pccodec", version, about = "Learned point cloud codec for classification")]
#[command(args_override_self = true)]
struct Cli {
    /// TOML file whose `[<subcommand>]` table supplies default flags.
    #[arg(long, global = true, value_name = "FILE")]
    settings: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a ModelNet40 directory tree into a packed dataset.
    Ingest {
        #[arg(long)]
        modelnet_dir: PathBuf,
        #[arg(long)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic packed dataset of deformed-sphere classes.
    Synth {
        #[arg(long, default_value_t = data::CLASSES)]
        classes: usize,
        #[arg(long, default_value_t = 20)]
        train_per_class: usize,
        #[arg(long, default_value_t = 5)]
        test_per_class: usize,
        #[arg(long)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and write its checkpoint.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        lambda: f64,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: TrainOpts,
        /// Training log (JSON lines).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Encode one cloud into a stream.
    Compress {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        input: CloudInput,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a stream into class logits.
    Decompress {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Classify one cloud in memory, without writing a stream.
    Classify {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        input: CloudInput,
    },
    /// Rate and accuracy of a checkpoint on a dataset split.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate one model per λ.
    Sweep {
        #[command(flatten)]
        model: ModelArgs,
        /// Comma-separated λ values.
        #[arg(long, value_delimiter = ',', default_values_t = train::LAMBDA_GRID)]
        lambdas: Vec<f64>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: TrainOpts,
    },
    /// Bjøntegaard-Delta metrics of two rate-accuracy CSV files.
    Bd {
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        anchor: PathBuf,
    },
    /// Indices of the points that determine the latent.
    CriticalPoints {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        input: CloudInput,
    },
    /// Train a point reconstruction network on a frozen checkpoint.
    ReconTrain {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 256)]
        hidden: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Reconstruct a cloud from its quantized latent.
    ReconRun {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        recon: PathBuf,
        #[command(flatten)]
        input: CloudInput,
        /// Write the reconstruction as an OFF point set.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Multiply-accumulate counts of the codec configurations.
    Macs {
        /// All configurations when omitted.
        #[arg(long)]
        config: Option<ConfigName>,
        #[arg(long, default_value_t = 1024)]
        points: usize,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    config: ConfigName,
    #[arg(long)]
    points: usize,
}

#[derive(Args)]
struct TrainOpts {
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 20)]
    patience: usize,
    #[arg(long, default_value_t = 0.1)]
    validation_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl TrainOpts {
    fn spec(&self, model: &ModelArgs, lambda: f64) -> TrainSpec {
        TrainSpec {
            lr: self.lr,
            batch_size: self.batch,
            epochs: self.epochs,
            patience: self.patience,
            validation_fraction: self.validation_fraction,
            seed: self.seed,
            ..TrainSpec::new(model.config, model.points, lambda)
        }
    }
}

#[derive(Args)]
struct CloudInput {
    /// An OFF mesh or a packed dataset.
    #[arg(long = "in")]
    input: PathBuf,
    /// Dataset record as `split:index` (datasets only).
    #[arg(long, default_value = "test:0")]
    record: String,
    /// Surface sampling seed (OFF meshes only).
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl CloudInput {
    /// The cloud, with OFF meshes sampled at `points` and normalized.
    fn load(&self, points: usize) -> Result<PointCloud> {
        let is_off = self
            .input
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("off"));
        if is_off {
            let text = std::fs::read_to_string(&self.input)
                .with_context(|| format!("reading {}", self.input.display()))?;
            let mesh = data::parse_off(&text).with_context(|| format!("parsing {}", self.input.display()))?;
            let cloud = data::sample_surface(&mesh, points, self.seed)?;
            return Ok(data::normalize(&cloud));
        }
        let ds = load_dataset(&self.input)?;
        let (split, index) = self
            .record
            .split_once(':')
            .with_context(|| format!("record `{}` is not of the form split:index", self.record))?;
        let index: usize = index.parse().with_context(|| format!("bad record index `{index}`"))?;
        let clouds = ds.split(parse_split(split)?);
        clouds
            .get(index)
            .cloned()
            .with_context(|| format!("{split} split has {} records, no index {index}", clouds.len()))
    }
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => bail!("unknown split `{s}` (expected train or test)"),
    }
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    data::read_dataset(BufReader::new(f)).with_context(|| format!("reading dataset {}", path.display()))
}

fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    data::write_dataset(&mut w, ds)?;
    w.flush()?;
    Ok(())
}

fn load_model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn argmax(logits: &[f32]) -> Result<usize> {
    Ok(argmax_columns(&Tensor::from_vec(&[logits.len(), 1], logits.to_vec())?)[0])
}

/// Trains one model; the log is written as JSON lines when `log` is given.
fn train_one(spec: &TrainSpec, ds: &Dataset, log: Option<&Path>) -> Result<(Model, train::FitSummary)> {
    ensure!(
        ds.points >= spec.points,
        "dataset has {} points per cloud, training needs {}",
        ds.points,
        spec.points
    );
    let mut writer = match log {
        Some(p) => Some(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => None,
    };
    let mut write_err = None;
    let lambda = spec.lambda;
    let result = train::train(spec, &ds.train, |rec| {
        info!(
            "λ={lambda} epoch {} step {}: loss {:.3} rate {:.2} bits acc {:.1}%",
            rec.epoch, rec.step, rec.loss, rec.rate, rec.accuracy
        );
        if let Some(w) = writer.as_mut() {
            let line = serde_json::to_string(rec).expect("log record serializes");
            if let Err(e) = writeln!(w, "{line}") {
                write_err.get_or_insert(e);
            }
        }
    });
    if let Some(w) = writer.as_mut() {
        w.flush()?;
    }
    if let Some(e) = write_err {
        return Err(e).context("writing training log");
    }
    Ok(result?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest {
            modelnet_dir,
            points,
            seed,
            out,
        } => {
            let ds = data::ingest_modelnet(&modelnet_dir, points, seed)
                .with_context(|| format!("ingesting {}", modelnet_dir.display()))?;
            write_dataset(&out, &ds)?;
            print_json(&json!({"train": ds.train.len(), "test": ds.test.len(), "points": points}))
        }
        Command::Synth {
            classes,
            train_per_class,
            test_per_class,
            points,
            seed,
            out,
        } => {
            ensure!(classes > 0 && classes <= data::CLASSES, "classes must lie in 1..={}", data::CLASSES);
            let ds = data::synthetic::generate(classes, train_per_class, test_per_class, points, seed);
            write_dataset(&out, &ds)?;
            print_json(&json!({"train": ds.train.len(), "test": ds.test.len(), "points": points}))
        }
        Command::Train {
            model,
            lambda,
            dataset,
            out,
            opts,
            log,
        } => {
            let spec = opts.spec(&model, lambda);
            let ds = load_dataset(&dataset)?;
            let (trained, summary) = train_one(&spec, &ds, log.as_deref())?;
            trained.save(&out).with_context(|| format!("writing {}", out.display()))?;
            print_json(&serde_json::to_value(summary)?)
        }
        Command::Compress { ckpt, input, out } => {
            let model = load_model(&ckpt)?;
            let cloud = input.load(model.codec.config().points)?;
            let stream = model.compress(&cloud.to_tensor())?;
            std::fs::write(&out, stream.to_bytes()).with_context(|| format!("writing {}", out.display()))?;
            print_json(&json!({"payload_bits": stream.payload_bits(), "points": cloud.len()}))
        }
        Command::Decompress { ckpt, input } => {
            let model = load_model(&ckpt)?;
            let bytes = std::fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            let stream = Bitstream::from_bytes(&bytes).context("parsing stream")?;
            let logits = model.decompress(&stream)?;
            print_json(&json!({"class": argmax(&logits)?, "logits": logits}))
        }
        Command::Classify { ckpt, input } => {
            let model = load_model(&ckpt)?;
            let cloud = input.load(model.codec.config().points)?;
            let logits = model.codec.classify(&cloud.to_tensor())?;
            print_json(&json!({"class": argmax(&logits)?, "logits": logits}))
        }
        Command::Evaluate {
            ckpt,
            dataset,
            split,
            out,
        } => {
            let model = load_model(&ckpt)?;
            let ds = load_dataset(&dataset)?;
            let e = train::evaluate(&model, ds.split(parse_split(&split)?))?;
            let config = model.codec.config();
            let point = RaPoint {
                config: config.name.to_string(),
                points: config.points,
                lambda: f64::from(model.lambda),
                rate_bits: e.rate_bits,
                top1: e.top1,
            };
            train::write_ra_csv(File::create(&out)?, &[point])?;
            print_json(&serde_json::to_value(e)?)
        }
        Command::Sweep {
            model,
            lambdas,
            dataset,
            out,
            opts,
        } => {
            ensure!(!lambdas.is_empty(), "no λ values given");
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let ds = load_dataset(&dataset)?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(train::worker_threads()?.min(lambdas.len()))
                .build()?;
            let points = pool.install(|| {
                lambdas
                    .par_iter()
                    .map(|&lambda| -> Result<RaPoint> {
                        let spec = opts.spec(&model, lambda);
                        let stem = format!("{}_p{}_l{lambda}", model.config, model.points);
                        let (trained, _) = train_one(&spec, &ds, Some(&out.join(format!("{stem}.jsonl"))))?;
                        trained.save(&out.join(format!("{stem}.ckpt")))?;
                        let e = train::evaluate(&trained, &ds.test)?;
                        Ok(RaPoint {
                            config: model.config.to_string(),
                            points: model.points,
                            lambda,
                            rate_bits: e.rate_bits,
                            top1: e.top1,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            train::write_ra_csv(File::create(out.join("ra.csv"))?, &points)?;
            let front = train::pareto_front(&points);
            train::write_ra_csv(File::create(out.join("pareto.csv"))?, &front)?;
            print_json(&json!({"points": points, "pareto": front}))
        }
        Command::Bd { test, anchor } => {
            let read = |p: &Path| -> Result<Vec<RaPoint>> {
                let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
                Ok(train::pareto_front(&train::read_ra_csv(f)?))
            };
            let report = train::bd_metrics(&read(&test)?, &read(&anchor)?)?;
            print_json(&serde_json::to_value(report)?)
        }
        Command::CriticalPoints { ckpt, input } => {
            let model = load_model(&ckpt)?;
            let cloud = input.load(model.codec.config().points)?;
            let set = model.codec.critical_points(&cloud.to_tensor())?;
            print_json(&json!({"indices": set.indices, "argmax": set.argmax, "points": cloud.len()}))
        }
        Command::ReconTrain {
            ckpt,
            dataset,
            out,
            epochs,
            hidden,
            batch,
            lr,
            seed,
            log,
        } => {
            let model = load_model(&ckpt)?;
            let ds = load_dataset(&dataset)?;
            let spec = ReconSpec {
                hidden,
                epochs,
                batch_size: batch,
                lr,
                seed,
            };
            let mut records = Vec::new();
            let net = train::train_recon(&model, &ds.train, &ds.test, &spec, |r| {
                info!("epoch {}: train chamfer {:.5} test {:.5}", r.epoch, r.train_chamfer, r.test_chamfer);
                records.push(*r);
            })?;
            if let Some(p) = log {
                let mut w = BufWriter::new(File::create(&p)?);
                for r in &records {
                    writeln!(w, "{}", serde_json::to_string(r)?)?;
                }
                w.flush()?;
            }
            net.save(&out).with_context(|| format!("writing {}", out.display()))?;
            print_json(&serde_json::to_value(records.last())?)
        }
        Command::ReconRun {
            ckpt,
            recon,
            input,
            out,
        } => {
            let model = load_model(&ckpt)?;
            let net = ReconNet::load(&recon).with_context(|| format!("loading {}", recon.display()))?;
            ensure!(
                net.latent() == model.codec.latent_size(),
                "reconstruction network expects a latent of {}, checkpoint has {}",
                net.latent(),
                model.codec.latent_size()
            );
            let cloud = input.load(model.codec.config().points)?;
            let q: Vec<f32> = model
                .quantized_latent(&cloud.to_tensor())?
                .into_iter()
                .map(|v| v as f32)
                .collect();
            let points = net.reconstruct(&q)?;
            let distance = train::chamfer(&points, &cloud.points)?;
            if let Some(p) = out {
                let mesh = data::Mesh {
                    vertices: points.iter().map(|p| p.map(f64::from)).collect(),
                    triangles: Vec::new(),
                };
                std::fs::write(&p, data::write_off(&mesh))?;
            }
            print_json(&json!({"chamfer": distance, "points": points}))
        }
        Command::Macs { config, points } => {
            let names = config.map_or(ConfigName::ALL.to_vec(), |c| vec![c]);
            let rows = names
                .into_iter()
                .map(|name| -> Result<serde_json::Value> {
                    let m = CodecConfig::new(name, points)?.mac_count();
                    Ok(json!({
                        "config": name,
                        "points": points,
                        "encoder_macs_per_point": m.encoder_per_point,
                        "encoder_per_point_k": format_kilo_2sf(m.encoder_per_point),
                        "encoder_macs_total": m.encoder_total(points),
                        "decoder_macs": m.decoder,
                        "decoder_k": format_kilo_2sf(m.decoder),
                    }))
                })
                .collect::<Result<Vec<_>>>()?;
            match <[_; 1]>::try_from(rows) {
                Ok([row]) => print_json(&row),
                Err(rows) => print_json(&serde_json::Value::Array(rows)),
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = match settings::merge(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
