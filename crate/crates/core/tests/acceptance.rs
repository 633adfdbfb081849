//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use brl::analysis::{EquivalenceReport, EQUIVALENCE_TOL};
use brl::autodiff::Graph;
use brl::classifier::train_classifier;
use brl::cli::eval_dataset;
use brl::conditioning::{
    bilinear_condition, brl_forward, concat_condition, film_condition, low_rank_bilinear, Activation,
    BilinearParams, BilinearResidual, ConcatParams, FilmParams, LayerDims, LayerKind, LowRankParams,
};
use brl::data::{generate_dataset, ShapeWorldSpec};
use brl::gan::{
    discriminator_loss, generator_loss, lsgan_discriminator_objective, lsgan_generator_objective, train, Batch,
    Discriminator, Generator, NetConfig, TrainConfig,
};
use brl::gradcheck::{self, DEFAULT_DRAWS, GRAD_TOL};
use brl::metrics::{edit_color_accuracy, inception_score_from_posteriors, split_score};
use brl::{Rng, Tensor};

// Pinned tolerances and budgets.
const VERIFY_DEVIATION: f64 = 1e-9;
const VERIFY_MAX_RANK: usize = 2;
const VERIFY_BUDGET: Duration = Duration::from_secs(5);
const FACTORIZATION_TOL: f64 = 1e-12;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);
const IS_IDENTICAL_TOL: f64 = 1e-9;
const IS_ONE_HOT_TOL: f64 = 1e-6;
const IS_BOUND_SLACK: f64 = 1e-9;
const MIN_EDIT_ACCURACY: f64 = 0.5;
const TRAIN_BUDGET: Duration = Duration::from_secs(15 * 60);
const MAX_EPOCHS: usize = 300;

// Desk-scale training run.
const DESK_EPOCHS: usize = 100;
const DESK_BATCH: usize = 16;
const DESK_SEEDS: [u64; 3] = [0, 1, 2];
const SWEEP_EPOCHS: usize = 40;
const SWEEP_RANKS: [usize; 3] = [2, 8, 16];

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn brl_bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brl"))
        .args(args)
        .output()
        .expect("spawn brl")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("brl-acceptance-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).expect("scratch dir");
    dir
}

fn theory_check() -> Outcome {
    let start = Instant::now();
    let out = brl_bin(&["verify", "--dims", "8x4x6", "--trials", "100", "--seed", "7"]);
    let elapsed = start.elapsed();
    ensure(out.status.code() == Some(0), format!("exit {:?}", out.status.code()))?;
    let report: EquivalenceReport = serde_json::from_slice(&out.stdout).map_err(e2s)?;
    ensure(report.trials == 100, format!("{} trials", report.trials))?;
    ensure(report.tolerance == EQUIVALENCE_TOL, "tolerance changed")?;
    ensure(
        report.max_deviation <= VERIFY_DEVIATION,
        format!("deviation {:e}", report.max_deviation),
    )?;
    ensure(
        report.ranks.iter().all(|&r| r <= VERIFY_MAX_RANK),
        format!("ranks {:?}", report.ranks),
    )?;
    ensure(elapsed < VERIFY_BUDGET, format!("took {elapsed:?}"))?;
    Ok(format!(
        "max deviation {:.2e}, ranks {:?}, {:.3}s",
        report.max_deviation,
        report.ranks,
        elapsed.as_secs_f64()
    ))
}

fn concat_is_film() -> Outcome {
    // FiLM on the condition [1, c] with gain weights whose first row is
    // all ones and others zero, and bias weights [0; W_c], is concatenation
    let dims = LayerDims::new(6, 4, 5);
    let mut rng = Rng::new(11);
    for k in 0..1000 {
        let concat = ConcatParams::init(&mut rng, dims, 1.0).map_err(e2s)?;
        let mut gain = Tensor::zeros(&[dims.condition + 1, dims.output]);
        for j in 0..dims.output {
            gain.set(&[0, j], 1.0);
        }
        let mut bias = vec![0.0; dims.output];
        bias.extend_from_slice(concat.w_c.data());
        let w_c = Tensor::new(&[dims.condition + 1, dims.output], bias).map_err(e2s)?;
        let film = FilmParams::new(concat.w_f.clone(), gain, w_c).map_err(e2s)?;
        let i_f = Tensor::gaussian_init(&mut rng, &[dims.feature], 1.0).map_err(e2s)?;
        let i_c = Tensor::gaussian_init(&mut rng, &[dims.condition], 1.0).map_err(e2s)?;
        let mut aug = vec![1.0];
        aug.extend_from_slice(i_c.data());
        let a = concat_condition(&concat, &i_f, &i_c).map_err(e2s)?;
        let b = film_condition(&film, &i_f, &Tensor::vector(&aug)).map_err(e2s)?;
        ensure(a == b, format!("input {k}: {:?} vs {:?}", a.data(), b.data()))?;
    }
    Ok("1000/1000 inputs bit-identical".into())
}

fn factorization_check() -> Outcome {
    let mut rng = Rng::new(12);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (d, dp, o) = (2 + rng.below(5), 2 + rng.below(5), 1 + rng.below(6));
        let dims = LayerDims::new(d, dp, o);
        let rank = d.min(dp);
        let lr = LowRankParams::init(&mut rng, dims, rank, 1.0).map_err(e2s)?;
        // W_i = U diag(P[i, :]) Vᵀ, built here by explicit sums
        let slices: Vec<Tensor> = (0..o)
            .map(|i| {
                let mut w = Tensor::zeros(&[d, dp]);
                for r in 0..d {
                    for c in 0..dp {
                        let mut s = 0.0;
                        for k in 0..rank {
                            s += lr.u.at(&[r, k]) * lr.p.at(&[i, k]) * lr.v.at(&[c, k]);
                        }
                        w.set(&[r, c], s);
                    }
                }
                w
            })
            .collect();
        let full = BilinearParams::from_slices(&slices).map_err(e2s)?;
        let i_f = Tensor::gaussian_init(&mut rng, &[d], 1.0).map_err(e2s)?;
        let i_c = Tensor::gaussian_init(&mut rng, &[dp], 1.0).map_err(e2s)?;
        let a = low_rank_bilinear(&lr, &i_f, &i_c).map_err(e2s)?;
        let b = bilinear_condition(&full, &i_f, &i_c).map_err(e2s)?;
        worst = worst.max(a.max_abs_diff(&b).map_err(e2s)?);
    }
    ensure(worst <= FACTORIZATION_TOL, format!("max diff {worst:e}"))?;
    Ok(format!("100 instances, max diff {worst:.2e}"))
}

fn residual_identity() -> Outcome {
    let mut rng = Rng::new(13);
    for _ in 0..50 {
        let dims = LayerDims::new(6, 4, 6);
        let p = Tensor::gaussian_init(&mut rng, &[6, 3], 1.0).map_err(e2s)?;
        let lr = LowRankParams::new(Tensor::zeros(&[6, 3]), Tensor::zeros(&[4, 3]), p).map_err(e2s)?;
        assert_eq!(lr.dims(), dims);
        let layer = BilinearResidual::new(lr, Activation::Identity).map_err(e2s)?;
        let x = Tensor::gaussian_init(&mut rng, &[3, 5, 6], 1.0).map_err(e2s)?;
        let c = Tensor::gaussian_init(&mut rng, &[4], 1.0).map_err(e2s)?;
        let y = brl_forward(&layer, &x, &c).map_err(e2s)?;
        ensure(y == x, "zero-factor layer changed its input")?;
    }
    let mut gen = Generator::new(&NetConfig::default(), &mut Rng::new(14)).map_err(e2s)?;
    gen.zero_fusion_factors();
    let x = Tensor::uniform_init(&mut rng, &[2, 16, 16, 3], -1.0, 1.0).map_err(e2s)?;
    let base = gen.generate(&x, &[0, 0]).map_err(e2s)?;
    for id in 1..gen.cfg.classes {
        let y = gen.generate(&x, &[id, id]).map_err(e2s)?;
        ensure(y == base, format!("generator output depends on attribute {id}"))?;
    }
    Ok("layer identity on 50 inputs; generator output identical across 8 attributes".into())
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let rows = gradcheck::run(&LayerKind::ALL, true, DEFAULT_DRAWS, &mut Rng::new(15)).map_err(e2s)?;
    let elapsed = start.elapsed();
    ensure(rows.len() == 6, "missing rows")?;
    for r in &rows {
        ensure(r.draws >= 20, format!("{}: {} draws", r.target, r.draws))?;
        ensure(r.max_rel_err <= GRAD_TOL, format!("{}: {:e}", r.target, r.max_rel_err))?;
    }
    ensure(elapsed < GRADCHECK_BUDGET, format!("took {elapsed:?}"))?;
    let worst = rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let worst_abs = rows.iter().map(|r| r.max_abs_err).fold(0.0, f64::max);
    Ok(format!(
        "{} targets x {} draws, max rel err {:.2e} (max abs {:.2e}), {:.1}s",
        rows.len(),
        DEFAULT_DRAWS,
        worst,
        worst_abs,
        elapsed.as_secs_f64()
    ))
}

fn loss_arithmetic() -> Outcome {
    let mut g = Graph::new();
    let half = g.constant(Tensor::full(&[4], 0.5));
    let zeros = g.constant(Tensor::zeros(&[4]));
    let ones = g.constant(Tensor::ones(&[4]));
    let l = lsgan_discriminator_objective(&mut g, half, half, half);
    ensure(g.scalar(l) == 0.75, format!("D≡0.5: {}", g.scalar(l)))?;
    let l = lsgan_discriminator_objective(&mut g, zeros, ones, zeros);
    ensure(g.scalar(l) == 0.0, format!("perfect D: {}", g.scalar(l)))?;
    let l = lsgan_generator_objective(&mut g, zeros);
    ensure(g.scalar(l) == 1.0, format!("D≡0: {}", g.scalar(l)))?;

    // the same values through whole networks with a constant discriminator
    let mut rng = Rng::new(16);
    let cfg = NetConfig {
        squash: false,
        ..NetConfig::default()
    };
    let gen = Generator::new(&cfg, &mut rng).map_err(e2s)?;
    let mut disc = Discriminator::new(&cfg, &mut rng).map_err(e2s)?;
    let batch = Batch {
        images: Tensor::uniform_init(&mut rng, &[3, 16, 16, 3], -1.0, 1.0).map_err(e2s)?,
        matching: vec![0, 3, 5],
        editing: vec![2, 1, 7],
        mismatching: vec![4, 6, 0],
    };
    disc.set_constant_output(0.5);
    let ld = discriminator_loss(&disc, &gen, &batch).map_err(e2s)?;
    ensure(ld == 0.75, format!("network D≡0.5: {ld}"))?;
    disc.set_constant_output(0.0);
    let lg = generator_loss(&disc, &gen, &batch).map_err(e2s)?;
    ensure(lg == 1.0, format!("network D≡0: {lg}"))?;
    Ok("0.75 / 0 / 1 exact on tensors and on networks".into())
}

fn is_metric() -> Outcome {
    let c = 8;
    let same = vec![vec![0.05, 0.1, 0.15, 0.2, 0.1, 0.1, 0.2, 0.1]; 40];
    let (m, _) = inception_score_from_posteriors(&same, 10).map_err(e2s)?;
    ensure((m - 1.0).abs() <= IS_IDENTICAL_TOL, format!("identical: {m}"))?;
    let one_hot: Vec<Vec<f64>> = (0..10 * c)
        .map(|i| (0..c).map(|j| if i % c == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let (m, _) = inception_score_from_posteriors(&one_hot, 10).map_err(e2s)?;
    ensure((m - c as f64).abs() <= IS_ONE_HOT_TOL, format!("one-hot: {m}"))?;
    let mut rng = Rng::new(17);
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for _ in 0..500 {
        let n = 2 + rng.below(30);
        let sharp = 10f64.powf(rng.uniform_range(-2.0, 2.0));
        let post: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let w: Vec<f64> = (0..c).map(|_| (sharp * rng.normal()).exp()).collect();
                let s: f64 = w.iter().sum();
                w.into_iter().map(|v| v / s).collect()
            })
            .collect();
        let is = split_score(&post).map_err(e2s)?;
        lo = lo.min(is);
        hi = hi.max(is);
    }
    ensure(
        lo >= 1.0 - IS_BOUND_SLACK && hi <= c as f64 + IS_BOUND_SLACK,
        format!("range [{lo}, {hi}]"),
    )?;
    Ok(format!("identical 1.0, one-hot {c}, 500 random splits in [{lo:.3}, {hi:.3}]"))
}

fn desk_spec() -> ShapeWorldSpec {
    ShapeWorldSpec::default()
}

fn desk_config(seed: u64, rank: usize, epochs: usize) -> TrainConfig {
    TrainConfig {
        batch: DESK_BATCH,
        epochs,
        rank,
        depth: 4,
        seed,
        ..TrainConfig::default()
    }
}

fn desk_training() -> Outcome {
    let spec = desk_spec();
    ensure(spec.num_classes() == 8 && spec.image_size == 16, "world is not 16x16 with 8 classes")?;
    ensure(DESK_EPOCHS <= MAX_EPOCHS, "epoch budget")?;
    let mut accs = Vec::new();
    let mut slowest = Duration::ZERO;
    for seed in DESK_SEEDS {
        let data = generate_dataset(&spec, &mut Rng::new(seed).fork(10)).map_err(e2s)?;
        let cfg = desk_config(seed, 8, DESK_EPOCHS);
        let start = Instant::now();
        let run = train(&cfg, &data, None).map_err(e2s)?;
        slowest = slowest.max(start.elapsed());
        ensure(
            run.metrics.iter().all(|m| m.loss_d.is_finite() && m.loss_g.is_finite()),
            format!("seed {seed}: non-finite loss"),
        )?;
        let eval = eval_dataset(&spec, seed).map_err(e2s)?;
        let clf = train_classifier(&eval, &mut Rng::new(seed).fork(12)).map_err(e2s)?;
        accs.push(edit_color_accuracy(&run.trainer.gen, &clf, &eval).map_err(e2s)?);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    ensure(slowest <= TRAIN_BUDGET, format!("slowest run {slowest:?}"))?;
    ensure(mean >= MIN_EDIT_ACCURACY, format!("mean edit colour accuracy {mean:.3}, per seed {accs:?}"))?;
    Ok(format!(
        "edit colour accuracy {:?} mean {:.3} (chance 0.125), slowest run {:.0}s",
        accs.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
        mean,
        slowest.as_secs_f64()
    ))
}

fn run_ok(args: &[&str]) -> Result<Output, String> {
    let out = brl_bin(args);
    if out.status.code() != Some(0) {
        return Err(format!(
            "brl {}: exit {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(out)
}

fn rank_sweep() -> Outcome {
    let dir = scratch("sweep");
    let epochs = SWEEP_EPOCHS.to_string();
    let mut ckpts = Vec::new();
    for d in SWEEP_RANKS {
        let out = dir.join(format!("d{d}"));
        let (ds, os) = (d.to_string(), out.to_string_lossy().to_string());
        run_ok(&[
            "train", "--rank", &ds, "--epochs", &epochs, "--batch", "16", "--seed", "0", "--out", &os,
        ])?;
        ckpts.push(out.join("checkpoint").to_string_lossy().to_string());
    }
    let eval_out = dir.join("eval").to_string_lossy().to_string();
    let mut args = vec!["eval", "--seed", "0", "--out", &eval_out];
    for c in &ckpts {
        args.push("--checkpoint");
        args.push(c);
    }
    run_ok(&args)?;
    let csv = fs::read_to_string(dir.join("eval/is_score.csv")).map_err(e2s)?;
    let mut lines = csv.lines();
    ensure(lines.next() == Some("method,d,mean,std"), "header")?;
    let mut report = Vec::new();
    for (line, want_d) in lines.zip(SWEEP_RANKS) {
        let f: Vec<&str> = line.split(',').collect();
        ensure(f.len() == 4 && f[0] == "brl", format!("row {line}"))?;
        let d: usize = f[1].parse().map_err(e2s)?;
        let mean: f64 = f[2].parse().map_err(e2s)?;
        ensure(d == want_d, format!("row for d={d}, expected {want_d}"))?;
        ensure(
            (1.0 - IS_BOUND_SLACK..=8.0 + IS_BOUND_SLACK).contains(&mean),
            format!("d={d}: IS {mean}"),
        )?;
        report.push((d, mean));
    }
    ensure(report.len() == SWEEP_RANKS.len(), "missing rows")?;
    let monotone = report.windows(2).all(|w| w[1].1 >= w[0].1);
    let _ = fs::remove_dir_all(&dir);
    Ok(format!(
        "IS by d: {} (monotone in d: {monotone}, reported only)",
        report
            .iter()
            .map(|(d, m)| format!("d={d} {m:.3}"))
            .collect::<Vec<_>>()
            .join(", ")
    ))
}

/// Every file under `dir`, relative path to bytes. The wall-clock column
/// of `metrics.csv` is dropped.
fn snapshot(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).map_err(e2s)? {
            let p = e.map_err(e2s)?.path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let rel = p.strip_prefix(dir).map_err(e2s)?.to_string_lossy().to_string();
            let mut bytes = fs::read(&p).map_err(e2s)?;
            if rel == "metrics.csv" {
                let text = String::from_utf8(bytes).map_err(e2s)?;
                bytes = text
                    .lines()
                    .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
                    .collect::<Vec<_>>()
                    .join("\n")
                    .into_bytes();
            }
            out.push((rel, bytes));
        }
    }
    out.sort();
    Ok(out)
}

fn determinism() -> Outcome {
    let dir = scratch("determinism");
    let runs: Vec<(&str, Vec<&str>)> = vec![
        ("verify", vec!["verify", "--dims", "8x4x6", "--trials", "20", "--seed", "4"]),
        ("gradcheck", vec!["gradcheck", "--layer", "brl", "--draws", "5", "--seed", "4"]),
        ("train", vec!["train", "--epochs", "3", "--batch", "16", "--samples-per-class", "4", "--seed", "4"]),
        ("sample", vec!["sample", "--seed", "4"]),
        ("eval", vec!["eval", "--seed", "4"]),
    ];
    let ckpt = dir.join("train-a/checkpoint").to_string_lossy().to_string();
    let mut checked = Vec::new();
    for (name, args) in &runs {
        let mut snaps = Vec::new();
        for tag in ["a", "b"] {
            let out = dir.join(format!("{name}-{tag}")).to_string_lossy().to_string();
            let mut full: Vec<&str> = args.clone();
            full.extend(["--out", out.as_str()]);
            if matches!(*name, "sample" | "eval") {
                full.extend(["--checkpoint", ckpt.as_str()]);
            }
            let o = run_ok(&full)?;
            let stdout = String::from_utf8_lossy(&o.stdout).replace(&out, "<out>");
            snaps.push((stdout, snapshot(Path::new(&out))?));
        }
        ensure(!snaps[0].1.is_empty(), format!("{name}: wrote no files"))?;
        ensure(snaps[0] == snaps[1], format!("{name}: outputs differ between runs"))?;
        checked.push(format!("{name} ({} files)", snaps[0].1.len()));
    }
    let _ = fs::remove_dir_all(&dir);
    Ok(format!("byte-identical reruns: {}", checked.join(", ")))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("1 theory check: FiLM as rank-2 bilinear", theory_check),
        ("2 concatenation is unit-gain FiLM", concat_is_film),
        ("3 low-rank factorization matches full bilinear", factorization_check),
        ("4 residual identity", residual_identity),
        ("5 gradient suite", gradient_suite),
        ("6 loss arithmetic", loss_arithmetic),
        ("7 inception score metric", is_metric),
        ("8 desk-scale training", desk_training),
        ("9 rank sweep report", rank_sweep),
        ("10 determinism", determinism),
    ];
    // Optional criterion numbers on the command line restrict the run.
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let (mut failed, mut ran) = (0, 0);
    for (name, check) in criteria {
        let number = name.split(' ').next().unwrap_or_default();
        if !only.is_empty() && !only.iter().any(|o| o == number) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {name}: PASS ({detail}) [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("criterion {name}: FAIL ({why}) [{secs:.1}s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
