//! Command-line front end: `verify`, `gradcheck`, `train`, `sample`, `eval`.
//!
//! Every option can also come from a `--config FILE` of `key=value` lines
//! (`#` starts a comment, keys use the long flag name with `-` or `_`).
//! Flags given on the command line win over file values.
//!
//! Exit codes: 0 success, 1 failed check or runtime error, 2 usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::analysis::verify_film_equivalence;
use crate::checkpoint;
use crate::classifier::train_classifier;
use crate::conditioning::{FilmParams, LayerDims, LayerKind};
use crate::data::{generate_dataset, image_grid, unstack_images, write_image_ppm, Dataset, ShapeWorldSpec};
use crate::error::{Error, Result};
use crate::gan::{train, TrainConfig};
use crate::gradcheck;
use crate::metrics::{all_pairs, edit_color_accuracy, inception_score};
use crate::rng::Rng;

pub const BUILD_ID: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("CARGO_PKG_NAME"));

/// Stream ids forked from the user seed.
const DATA_STREAM: u64 = 10;
const EVAL_DATA_STREAM: u64 = 11;
const CLASSIFIER_STREAM: u64 = 12;
const SCORE_STREAM: u64 = 13;

/// Per-class sample count of the classifier's training set in `eval`.
const EVAL_SAMPLES_PER_CLASS: usize = 32;

#[derive(Parser, Debug)]
#[command(name = "brl", version = BUILD_ID, about = "Bilinear residual conditioning: checks, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check that FiLM equals a rank-2 bilinear map per input.
    Verify(VerifyArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Train the editing GAN on synthetic shapes.
    Train(TrainArgs),
    /// Write an all-pairs grid of edited images from a checkpoint.
    Sample(SampleArgs),
    /// Inception score and edit accuracy of one or more checkpoints.
    Eval(EvalArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker cap; all work currently runs on the calling thread.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    /// `DxD'xO`, e.g. `8x4x6`.
    #[arg(long)]
    dims: Option<String>,
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    /// Check one layer only; without it every layer and both losses run.
    #[arg(long)]
    layer: Option<LayerKind>,
    #[arg(long)]
    draws: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Fusion layer of the generator; only `brl` is supported.
    #[arg(long)]
    layer: Option<LayerKind>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    samples_per_class: Option<usize>,
    /// Leave the discriminator output unbounded.
    #[arg(long)]
    no_squash: bool,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint directory; repeat to score several.
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
}

/// `key=value` settings with usage tracking, so unknown keys are rejected.
#[derive(Default)]
struct ConfigFile {
    values: BTreeMap<String, String>,
    used: Vec<String>,
}

impl ConfigFile {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut values = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key=value", n + 1)))?;
            values.insert(k.trim().replace('-', "_"), v.trim().to_string());
        }
        Ok(Self {
            values,
            used: Vec::new(),
        })
    }

    fn get<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.used.push(key.to_string());
        self.values
            .get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::Config(format!("config key {key}: {e}")))
            })
            .transpose()
    }

    fn pick<T: FromStr>(&mut self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        let file = self.get(key)?;
        Ok(flag.or(file).unwrap_or(default))
    }

    fn finish(&self) -> Result<()> {
        match self.values.keys().find(|k| !self.used.contains(k)) {
            Some(k) => Err(Error::Config(format!("unknown config key {k}"))),
            None => Ok(()),
        }
    }
}

struct Resolved {
    seed: u64,
    out: Option<PathBuf>,
}

fn resolve_common(c: &Common, file: &mut ConfigFile) -> Result<Resolved> {
    let seed = file.pick(c.seed, "seed", 0)?;
    let out: Option<PathBuf> = file.get::<PathBuf>("out")?;
    let threads = file.pick(c.threads, "threads", 1)?;
    if threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    Ok(Resolved {
        seed,
        out: c.out.clone().or(out),
    })
}

fn out_dir(r: &Resolved, default: &str) -> Result<PathBuf> {
    let dir = r.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Outcome of a subcommand that ran to completion.
enum Status {
    Ok,
    CheckFailed,
}

fn cmd_verify(a: &VerifyArgs) -> Result<Status> {
    let mut file = ConfigFile::load(a.common.config.as_deref())?;
    let r = resolve_common(&a.common, &mut file)?;
    let dims = LayerDims::parse(&file.pick(a.dims.clone(), "dims", "8x4x6".to_string())?)?;
    let trials = file.pick(a.trials, "trials", 100)?;
    file.finish()?;
    if trials == 0 {
        return Err(Error::Config("--trials must be at least 1".into()));
    }
    let root = Rng::new(r.seed);
    let mut report = None;
    for k in 0..trials as u64 {
        let p = FilmParams::init(&mut root.fork(2 * k), dims, 1.0)?;
        let one = verify_film_equivalence(&p, 1, &mut root.fork(2 * k + 1))?;
        match &mut report {
            None => report = Some(one),
            Some(acc) => acc.merge(&one),
        }
    }
    let report = report.expect("at least one trial");
    let json = report.to_json();
    println!("{json}");
    if let Some(dir) = &r.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("verify.json"), format!("{json}\n"))?;
    }
    Ok(if report.pass { Status::Ok } else { Status::CheckFailed })
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<Status> {
    let mut file = ConfigFile::load(a.common.config.as_deref())?;
    let r = resolve_common(&a.common, &mut file)?;
    let layer = match a.layer {
        Some(l) => Some(l),
        None => file.get::<LayerKind>("layer")?,
    };
    let draws = file.pick(a.draws, "draws", gradcheck::DEFAULT_DRAWS)?;
    file.finish()?;
    if draws == 0 {
        return Err(Error::Config("--draws must be at least 1".into()));
    }
    let mut rng = Rng::new(r.seed);
    let rows = match layer {
        Some(kind) => gradcheck::run(&[kind], false, draws, &mut rng)?,
        None => gradcheck::run(&LayerKind::ALL, true, draws, &mut rng)?,
    };
    let csv = gradcheck::csv(&rows);
    print!("{csv}");
    if let Some(dir) = &r.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("gradcheck.csv"), &csv)?;
    }
    Ok(if rows.iter().all(|r| r.pass()) {
        Status::Ok
    } else {
        Status::CheckFailed
    })
}

fn cmd_train(a: &TrainArgs) -> Result<Status> {
    let mut file = ConfigFile::load(a.common.config.as_deref())?;
    let r = resolve_common(&a.common, &mut file)?;
    let d = TrainConfig::default();
    let layer = file.pick(a.layer, "layer", LayerKind::Brl)?;
    if layer != LayerKind::Brl {
        return Err(Error::Config(format!(
            "the generator fuses with brl layers only, got {}",
            layer.name()
        )));
    }
    let squash_file = file.get::<bool>("squash")?;
    let cfg = TrainConfig {
        lr: file.pick(a.lr, "lr", d.lr)?,
        beta1: file.pick(a.beta1, "beta1", d.beta1)?,
        beta2: file.pick(a.beta2, "beta2", d.beta2)?,
        batch: file.pick(a.batch, "batch", d.batch)?,
        epochs: file.pick(a.epochs, "epochs", d.epochs)?,
        rank: file.pick(a.rank, "rank", d.rank)?,
        depth: file.pick(a.depth, "depth", d.depth)?,
        seed: r.seed,
        checkpoint_every: file.pick(a.checkpoint_every, "checkpoint_every", d.checkpoint_every)?,
        squash: if a.no_squash { false } else { squash_file.unwrap_or(d.squash) },
    };
    let spec = ShapeWorldSpec {
        samples_per_class: file.pick(a.samples_per_class, "samples_per_class", ShapeWorldSpec::default().samples_per_class)?,
        ..ShapeWorldSpec::default()
    };
    file.finish()?;
    cfg.validate()?;
    cfg.net_config_for(&spec).validate()?;
    let dir = out_dir(&r, "run")?;
    let data = generate_dataset(&spec, &mut Rng::new(r.seed).fork(DATA_STREAM))?;
    let outcome = train(&cfg, &data, Some(&dir))?;
    match outcome.metrics.last() {
        Some(m) => println!(
            "trained {} epochs: loss_d {:.6} loss_g {:.6}; checkpoint in {}",
            m.epoch,
            m.loss_d,
            m.loss_g,
            dir.join("checkpoint").display()
        ),
        None => println!("no epochs run; initial checkpoint in {}", dir.join("checkpoint").display()),
    }
    Ok(Status::Ok)
}

pub fn eval_dataset(spec: &ShapeWorldSpec, seed: u64) -> Result<Dataset> {
    let spec = ShapeWorldSpec {
        samples_per_class: spec.samples_per_class.max(EVAL_SAMPLES_PER_CLASS),
        ..spec.clone()
    };
    generate_dataset(&spec, &mut Rng::new(seed).fork(EVAL_DATA_STREAM))
}

fn cmd_sample(a: &SampleArgs) -> Result<Status> {
    let mut file = ConfigFile::load(a.common.config.as_deref())?;
    let r = resolve_common(&a.common, &mut file)?;
    let ck_path = match &a.checkpoint {
        Some(p) => p.clone(),
        None => file
            .get::<PathBuf>("checkpoint")?
            .ok_or_else(|| Error::Config("--checkpoint is required".into()))?,
    };
    file.finish()?;
    let ck = checkpoint::load(&ck_path)?;
    let dir = out_dir(&r, "samples")?;
    let data = eval_dataset(&ck.manifest.data, r.seed)?;
    let (edited, _) = all_pairs(&ck.gen, &data)?;
    let c = data.num_classes();
    let sources = data.images(&data.one_per_class());
    write_image_ppm(&image_grid(&unstack_images(&sources), 1)?, dir.join("sources.ppm"))?;
    write_image_ppm(&image_grid(&unstack_images(&edited), c)?, dir.join("grid.ppm"))?;
    println!("wrote {c}x{c} edit grid to {}", dir.join("grid.ppm").display());
    Ok(Status::Ok)
}

fn cmd_eval(a: &EvalArgs) -> Result<Status> {
    let mut file = ConfigFile::load(a.common.config.as_deref())?;
    let r = resolve_common(&a.common, &mut file)?;
    let mut paths = a.checkpoint.clone();
    if paths.is_empty() {
        if let Some(p) = file.get::<PathBuf>("checkpoint")? {
            paths.push(p);
        }
    }
    file.finish()?;
    if paths.is_empty() {
        return Err(Error::Config("at least one --checkpoint is required".into()));
    }
    let checkpoints = paths.iter().map(checkpoint::load).collect::<Result<Vec<_>>>()?;
    let spec = checkpoints[0].manifest.data.clone();
    if let Some(bad) = checkpoints.iter().find(|c| c.manifest.data.image_size != spec.image_size
        || c.manifest.data.num_classes() != spec.num_classes())
    {
        return Err(Error::Config(format!(
            "checkpoints disagree on the dataset: {:?} vs {:?}",
            bad.manifest.data, spec
        )));
    }
    let data = eval_dataset(&spec, r.seed)?;
    let root = Rng::new(r.seed);
    let clf = train_classifier(&data, &mut root.fork(CLASSIFIER_STREAM))?;
    let dir = out_dir(&r, "eval")?;
    let mut is_csv = String::from("method,d,mean,std\n");
    let mut acc_csv = String::from("method,d,color_accuracy\n");
    for (k, ck) in checkpoints.iter().enumerate() {
        let d = ck.gen.cfg.rank;
        let (edited, _) = all_pairs(&ck.gen, &data)?;
        let (mean, std) = inception_score(&clf, &edited, &mut root.fork(SCORE_STREAM))?;
        let acc = edit_color_accuracy(&ck.gen, &clf, &data)?;
        is_csv.push_str(&format!("brl,{d},{mean},{std}\n"));
        acc_csv.push_str(&format!("brl,{d},{acc}\n"));
        let c = data.num_classes();
        write_image_ppm(&image_grid(&unstack_images(&edited), c)?, dir.join(format!("grid_{k}_d{d}.ppm")))?;
        println!("brl d={d}: IS {mean:.4} ± {std:.4}, edit colour accuracy {acc:.4}");
    }
    fs::write(dir.join("is_score.csv"), is_csv)?;
    fs::write(dir.join("accuracy.csv"), acc_csv)?;
    Ok(Status::Ok)
}

fn usage_error(e: &Error) -> bool {
    matches!(e, Error::Config(_) | Error::Parameter(_))
}

/// Parses `argv` (program name first), runs the subcommand and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Verify(a) => cmd_verify(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(Status::Ok) => 0,
        Ok(Status::CheckFailed) => {
            eprintln!("check failed");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            if usage_error(&e) {
                2
            } else {
                1
            }
        }
    }
}
