//! `eqpf`: train / eval / shift-eval / verify / bench over the library.
//!
//! Settings resolve in precedence order: command-line flags, then the
//! `--config` file (flat `key = value` lines, keys matching the long flag
//! names with underscores), then built-in defaults. Usage errors exit
//! with status 2, runtime failures with 1.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

use eqpf_core::check::scaling::{
    doubling_ratios, measure_attention_scaling, measure_s2_scaling,
};
use eqpf_core::check::{run_suite, VerifyOptions};
use eqpf_core::data::{
    cifar10_paths, fashion_paths, load_cifar10, load_idx, mnist_paths, resize_bilinear,
    resolve_data_dir, Dataset, LabeledImage,
};
use eqpf_core::experiment::{
    load_run, read_manifest, shift_sweep, train, write_manifest, write_sweep_csv, Precision,
    RedrawSchedule, TrainConfig,
};
use eqpf_core::model::ModelConfig;
use eqpf_core::positional::EncodingMode;

#[derive(Parser)]
#[command(
    name = "eqpf",
    version,
    about = "Kernelized linear attention with shift-equivariant relative positional encodings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, metrics, and manifest.
    Train(TrainArgs),
    /// Evaluate a finished run on a dataset split.
    Eval(EvalArgs),
    /// Evaluate runs on the x-shifted eligible subset of one class.
    ShiftEval(ShiftEvalArgs),
    /// Run the self-verification suite (no data needed).
    Verify(VerifyArgs),
    /// Wall-clock scaling report: exact vs linear attention, naive vs
    /// fast relative-position sums.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DatasetKind {
    Mnist,
    Fashion,
    Cifar10,
}

impl DatasetKind {
    fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Fashion => "fashion",
            DatasetKind::Cifar10 => "cifar10",
        }
    }

    fn channels(self) -> usize {
        match self {
            DatasetKind::Cifar10 => 3,
            _ => 1,
        }
    }
}

impl FromStr for DatasetKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "fashion" => Ok(DatasetKind::Fashion),
            "cifar10" => Ok(DatasetKind::Cifar10),
            other => Err(format!(
                "unknown dataset {other:?}; expected one of mnist, fashion, cifar10"
            )),
        }
    }
}

fn parse_mode(s: &str) -> Result<EncodingMode, String> {
    EncodingMode::from_str(s)
}

#[derive(Args)]
struct CommonArgs {
    /// Flat key = value settings file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root directory (or EQPF_DATA_DIR; default ./data).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Worker threads for tensor kernels (default: all cores). Use 1 for
    /// fully single-threaded runs.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    dataset: Option<DatasetKind>,
    /// Positional encoding mode: none, absolute, s1, s2.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<EncodingMode>,
    /// Maximum relative distance for s2.
    #[arg(long)]
    clip: Option<usize>,
    /// Random feature draws per head.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Square input resolution the images are resized to.
    #[arg(long)]
    image_size: Option<usize>,
    /// Run directory for checkpoint, metrics, and manifest.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// f32 (training default) or f64.
    #[arg(long)]
    precision: Option<Precision>,
    /// Feature redraw schedule: epoch, never, or steps:N.
    #[arg(long)]
    redraw: Option<RedrawSchedule>,
    /// Use only this many training samples per epoch.
    #[arg(long)]
    train_limit: Option<usize>,
    /// Stop once validation accuracy reaches this value.
    #[arg(long)]
    target_acc: Option<f64>,
    /// With --target-acc: also evaluate every N optimizer steps.
    #[arg(long)]
    eval_every: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Run directory containing checkpoint.eqpf and manifest.txt.
    #[arg(long)]
    run_dir: PathBuf,
    /// Dataset override (defaults to the one recorded in the manifest).
    #[arg(long)]
    dataset: Option<DatasetKind>,
    /// Evaluate the train split instead of the test split.
    #[arg(long)]
    train_split: bool,
}

#[derive(Args)]
struct ShiftEvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Run directories (one per seed); repeat the flag to aggregate.
    #[arg(long, required = true)]
    run_dir: Vec<PathBuf>,
    /// Class whose eligible subset is evaluated (e.g. digit 1).
    #[arg(long = "class")]
    class_id: u8,
    #[arg(long)]
    dataset: Option<DatasetKind>,
    /// Output CSV path (default: <first run dir>/shift_sweep.csv).
    #[arg(long)]
    out: Option<PathBuf>,
    /// run_dir column label in the CSV (default: first run dir name).
    #[arg(long)]
    label: Option<String>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Root seed for the randomized checks.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Feature count for the unbiasedness check.
    #[arg(long, default_value_t = 2048)]
    m: usize,
    /// Independent feature redraws for the unbiasedness check.
    #[arg(long, default_value_t = 200)]
    redraws: usize,
    /// Trials per operation in the gradient checks.
    #[arg(long, default_value_t = 4)]
    grad_trials: usize,
    /// Replace the rotation-scaling constraint with generic blocks; the
    /// invariance checks must then fail.
    #[arg(long)]
    break_lemma: bool,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    /// Write the scaling table as CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Timing repetitions per configuration (median is reported).
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::ShiftEval(args) => cmd_shift_eval(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Bench(args) => cmd_bench(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

type AnyError = Box<dyn std::error::Error>;

fn set_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}

// ── config-file handling ────────────────────────────────────────────

fn load_config_file(path: Option<&PathBuf>) -> Result<HashMap<String, String>, AnyError> {
    match path {
        None => Ok(HashMap::new()),
        Some(p) => Ok(read_manifest(p)?),
    }
}

/// flag value, else config-file value, else default.
fn setting<T: FromStr + Clone>(
    flag: Option<T>,
    file: &HashMap<String, String>,
    key: &str,
    default: T,
) -> Result<T, AnyError>
where
    T::Err: std::fmt::Display,
{
    if let Some(v) = flag {
        return Ok(v);
    }
    if let Some(raw) = file.get(key) {
        return raw
            .parse::<T>()
            .map_err(|e| format!("config key {key:?}: {e}").into());
    }
    Ok(default)
}

// ── dataset loading ─────────────────────────────────────────────────

fn load_split(kind: DatasetKind, data_dir: &Path, train: bool) -> Result<Dataset, AnyError> {
    let ds = match kind {
        DatasetKind::Mnist => {
            let (imgs, labs) = mnist_paths(data_dir, train);
            load_idx(&imgs, &labs)?
        }
        DatasetKind::Fashion => {
            let (imgs, labs) = fashion_paths(data_dir, train);
            load_idx(&imgs, &labs)?
        }
        DatasetKind::Cifar10 => load_cifar10(&cifar10_paths(data_dir, train))?,
    };
    Ok(ds)
}

fn resize_all(ds: &Dataset, h: usize, w: usize) -> Dataset {
    Dataset {
        images: ds
            .images
            .iter()
            .map(|im| resize_bilinear(im, h, w))
            .collect(),
        sha256: ds.sha256.clone(),
    }
}

// ── subcommands ─────────────────────────────────────────────────────

fn cmd_train(args: TrainArgs) -> Result<ExitCode, AnyError> {
    set_threads(args.common.threads);
    let file = load_config_file(args.common.config.as_ref())?;
    let dataset = setting(args.dataset, &file, "dataset", DatasetKind::Mnist)?;
    let mode = setting(args.mode, &file, "mode", EncodingMode::Absolute)?;
    let image_size = setting(args.image_size, &file, "image_size", 32usize)?;
    let model_cfg = ModelConfig {
        dim: setting(args.dim, &file, "dim", 256)?,
        depth: setting(args.depth, &file, "depth", 6)?,
        heads: setting(args.heads, &file, "heads", 8)?,
        feature_count: setting(args.m, &file, "m", 128)?,
        mode,
        clip: setting(args.clip, &file, "clip", 6)?,
        dropout: setting(None, &file, "dropout", 0.1)?,
        ffn_mult: setting(None, &file, "ffn_mult", 4)?,
        classes: 10,
        image_h: image_size,
        image_w: image_size,
        channels: dataset.channels(),
        lengthscales: setting(None, &file, "lengthscales", 4)?,
    };
    let train_cfg = TrainConfig {
        lr: setting(args.lr, &file, "lr", 5e-4)?,
        batch: setting(args.batch, &file, "batch", 22)?,
        epochs: setting(args.epochs, &file, "epochs", 5)?,
        seed: setting(args.seed, &file, "seed", 42)?,
        redraw: setting(args.redraw, &file, "redraw", RedrawSchedule::EveryEpoch)?,
        precision: setting(args.precision, &file, "precision", Precision::F32)?,
        train_limit: args
            .train_limit
            .or_else(|| file.get("train_limit").and_then(|v| v.parse().ok())),
        target_accuracy: args
            .target_acc
            .or_else(|| file.get("target_acc").and_then(|v| v.parse().ok())),
        eval_every_steps: args
            .eval_every
            .or_else(|| file.get("eval_every").and_then(|v| v.parse().ok())),
        log_every: 50,
    };
    model_cfg.validate()?;

    let data_dir = resolve_data_dir(args.common.data_dir.as_deref());
    let run_dir = match args.out_dir {
        Some(d) => d,
        None => PathBuf::from("runs").join(format!(
            "{}-{}-seed{}",
            dataset.name(),
            mode,
            train_cfg.seed
        )),
    };

    eprintln!(
        "loading {} from {} ...",
        dataset.name(),
        data_dir.display()
    );
    let train_raw = load_split(dataset, &data_dir, true)?;
    let val_raw = load_split(dataset, &data_dir, false)?;
    let train_set = resize_all(&train_raw, image_size, image_size);
    let val_set = resize_all(&val_raw, image_size, image_size);
    eprintln!(
        "training mode={mode} dim={} depth={} heads={} m={} on {} images ({}x{}), validating on {}",
        model_cfg.dim,
        model_cfg.depth,
        model_cfg.heads,
        model_cfg.feature_count,
        train_cfg
            .train_limit
            .unwrap_or(train_set.len())
            .min(train_set.len()),
        image_size,
        image_size,
        val_set.len()
    );

    let report = train(
        &model_cfg,
        &train_cfg,
        dataset.name(),
        &train_set,
        &val_set,
        &run_dir,
    )?;
    println!(
        "run {}: val_acc {:.4} after {} epochs ({} steps, {:.1}s, clamp events {})",
        report.run_dir.display(),
        report.val_accuracy,
        report.epochs_run,
        report.step_losses.len(),
        report.wall_secs,
        report.clamp_events
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode, AnyError> {
    set_threads(args.common.threads);
    let run = load_run(&args.run_dir)?;
    let manifest = read_manifest(&args.run_dir.join("manifest.txt"))?;
    let dataset = match args.dataset {
        Some(d) => d,
        None => manifest
            .get("dataset")
            .ok_or("manifest has no dataset entry")?
            .parse::<DatasetKind>()?,
    };
    let data_dir = resolve_data_dir(args.common.data_dir.as_deref());
    let raw = load_split(dataset, &data_dir, args.train_split)?;
    let cfg = run.config();
    let resized = resize_all(&raw, cfg.image_h, cfg.image_w);
    let refs: Vec<&LabeledImage> = resized.images.iter().collect();
    let acc = run.evaluate(&refs)?;
    println!(
        "{} on {} {} split: accuracy {:.4} ({} images)",
        args.run_dir.display(),
        dataset.name(),
        if args.train_split { "train" } else { "test" },
        acc,
        refs.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_shift_eval(args: ShiftEvalArgs) -> Result<ExitCode, AnyError> {
    set_threads(args.common.threads);
    let manifest = read_manifest(&args.run_dir[0].join("manifest.txt"))?;
    let dataset = match args.dataset {
        Some(d) => d,
        None => manifest
            .get("dataset")
            .ok_or("manifest has no dataset entry")?
            .parse::<DatasetKind>()?,
    };
    let data_dir = resolve_data_dir(args.common.data_dir.as_deref());
    let test_set = load_split(dataset, &data_dir, false)?;
    let sweep = shift_sweep(
        &args.run_dir,
        &test_set,
        args.class_id,
        args.label.as_deref(),
    )?;
    let out = args
        .out
        .unwrap_or_else(|| args.run_dir[0].join("shift_sweep.csv"));
    write_sweep_csv(&out, &sweep)?;
    let mut entries = vec![
        ("dataset".to_string(), dataset.name().to_string()),
        ("class".to_string(), args.class_id.to_string()),
        ("margin".to_string(), "8".to_string()),
        ("label".to_string(), sweep.label.clone()),
        ("runs".to_string(), args.run_dir.len().to_string()),
    ];
    for (i, (dir, size)) in args.run_dir.iter().zip(&sweep.subset_sizes).enumerate() {
        entries.push((format!("run{i}_dir"), dir.display().to_string()));
        entries.push((format!("run{i}_eligible_subset"), size.to_string()));
    }
    let sweep_manifest = out.with_extension("manifest.txt");
    write_manifest(&sweep_manifest, &entries)?;
    println!("wrote {} rows to {}", sweep.rows.len(), out.display());
    for row in &sweep.rows {
        println!(
            "shift {:+} accuracy {:.4} +- {:.4}",
            row.shift, row.accuracy_mean, row.accuracy_std
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(args: VerifyArgs) -> Result<ExitCode, AnyError> {
    set_threads(args.threads);
    let opts = VerifyOptions {
        seed: args.seed,
        unbiased_m: args.m,
        redraws: args.redraws,
        grad_trials: args.grad_trials,
        break_lemma: args.break_lemma,
    };
    let reports = run_suite(&opts);
    let mut failures = 0;
    for r in &reports {
        println!(
            "{} {:<45} {:>6.2}s  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.secs,
            r.detail
        );
        if !r.passed {
            failures += 1;
        }
    }
    println!(
        "{} checks, {} failed{}",
        reports.len(),
        failures,
        if args.break_lemma {
            " (failures expected under --break-lemma)"
        } else {
            ""
        }
    );
    Ok(if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_bench(args: BenchArgs) -> Result<ExitCode, AnyError> {
    set_threads(args.threads);
    let mut csv = String::from("section,l,clip,exact_secs,linear_secs,naive_secs,fast_secs,exact_peak_numel,linear_peak_numel,linear_has_square\n");

    println!("attention scaling (m=64 features, d_head=8, median of {} reps)", args.reps);
    let rows = measure_attention_scaling(&[256, 512, 1024, 2048], 64, 8, args.reps, args.seed);
    println!(
        "{:>6} {:>12} {:>12} {:>14} {:>14} {:>8}",
        "L", "exact (s)", "linear (s)", "exact peak", "linear peak", "square?"
    );
    for r in &rows {
        println!(
            "{:>6} {:>12.5} {:>12.5} {:>14} {:>14} {:>8}",
            r.l, r.exact_secs, r.linear_secs, r.exact_peak_numel, r.linear_peak_numel, r.linear_has_square
        );
        let _ = writeln!(
            csv,
            "attention,{},,{:.6},{:.6},,,{},{},{}",
            r.l, r.exact_secs, r.linear_secs, r.exact_peak_numel, r.linear_peak_numel, r.linear_has_square
        );
    }
    let exact_ratios = doubling_ratios(&rows, |r| r.exact_secs);
    let linear_ratios = doubling_ratios(&rows, |r| r.linear_secs);
    println!("per-doubling time ratios: exact {exact_ratios:.2?}, linear {linear_ratios:.2?}");
    let square = rows.iter().any(|r| r.linear_has_square);
    println!(
        "linear-path allocation audit: no L x L buffer = {}",
        !square
    );

    println!();
    println!("relative-position sums on a 32x32 grid (L=1024, m=8, median of {} reps)", args.reps);
    let s2 = measure_s2_scaling(32, 32, &[2, 4, 6], 8, 8, args.reps, args.seed);
    println!(
        "{:>6} {:>6} {:>12} {:>12} {:>10} {:>12}",
        "L", "clip", "naive (s)", "fast (s)", "speedup", "max |diff|"
    );
    for r in &s2 {
        println!(
            "{:>6} {:>6} {:>12.5} {:>12.5} {:>10.1} {:>12.2e}",
            r.l,
            r.clip,
            r.naive_secs,
            r.fast_secs,
            r.naive_secs / r.fast_secs.max(1e-12),
            r.max_abs_diff
        );
        let _ = writeln!(
            csv,
            "s2,{},{},,,{:.6},{:.6},,,",
            r.l, r.clip, r.naive_secs, r.fast_secs
        );
    }

    if let Some(path) = args.out {
        std::fs::write(&path, csv)?;
        println!("wrote CSV to {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}
