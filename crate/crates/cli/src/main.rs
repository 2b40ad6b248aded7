mod config;

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{ArgAction, Args, CommandFactory, Parser, Subcommand, ValueEnum};
use kplm_core::codec::{encode_example, DEFAULT_BINS};
use kplm_core::dataset::{read_dataset, write_dataset};
use kplm_core::eval::{build_label_trie, evaluate, greedy_decode, predict, DecodeMode, DEFAULT_MAX_LABEL_LEN};
use kplm_core::ingest::{build_dataset, group_video, parse_alphapose, sample_frames, IngestOptions};
use kplm_core::skeleton::{normalize_sequence, DEFAULT_MARGIN_FRAC, DEFAULT_TAU};
use kplm_core::synth::{generate_dataset, ActivityClass, SynthSpec};
use kplm_core::train::{
    build_vocab, load_checkpoint, log_row_csv, save_checkpoint, train, TrainConfig, TrainOptions, LOG_HEADER,
};
use kplm_core::{ModelConfig, PoseSequence};
use thiserror::Error;

/// Activity recognition by generating labels from pose keypoint tokens.
///
/// Flags may also come from a `--config` file of `key=value` lines; flags on
/// the command line take precedence over the file, and the file over the
/// built-in defaults.
#[derive(Parser)]
#[command(name = "kplm", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Global {
    /// Flat key=value file supplying flag values.
    #[arg(long, global = true, value_name = "PATH", display_order = 100)]
    config: Option<PathBuf>,
    /// Seed for every random choice (synthesis, initialization, shuffling, dropout).
    #[arg(long, global = true, default_value_t = 42, display_order = 101)]
    seed: u64,
    /// Single-threaded numeric paths; outputs are bit-reproducible.
    #[arg(long, global = true, default_value_t = true, action = ArgAction::Set, value_name = "BOOL", display_order = 102)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic train/val datasets.
    Synth(SynthArgs),
    /// Build a dataset from AlphaPose result files and a manifest.
    Ingest(IngestArgs),
    /// Train a model and write the best checkpoint and the training log.
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Predict the label of one pose sequence.
    Infer(InferArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Comma-separated activity classes.
    #[arg(long, value_delimiter = ',', default_value = "wave,squat,jump,clap,march")]
    classes: Vec<ActivityClass>,
    /// Training sequences per class; validation gets a quarter, rounded up.
    #[arg(long, default_value_t = 200)]
    count: usize,
    /// Gaussian keypoint noise in pixels.
    #[arg(long, default_value_t = 2.0)]
    noise_sigma: f64,
    /// Output directory for train.jsonl and val.jsonl.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    /// Directory the manifest's pose_file paths are relative to.
    #[arg(long, value_name = "DIR")]
    alphapose_dir: PathBuf,
    /// CSV with header video_id,pose_file,label.
    #[arg(long, value_name = "PATH")]
    manifest: PathBuf,
    /// Output dataset file (JSON lines).
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Skip report CSV [default: <OUT stem>_skips.csv next to OUT].
    #[arg(long, value_name = "PATH")]
    skip_report: Option<PathBuf>,
    /// Minimum confidence for a keypoint to count as present.
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    /// Bounding-box margin as a fraction of its larger side.
    #[arg(long, default_value_t = DEFAULT_MARGIN_FRAC)]
    margin: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset (JSON lines).
    #[arg(long, value_name = "PATH")]
    train: PathBuf,
    /// Validation dataset (JSON lines).
    #[arg(long, value_name = "PATH")]
    val: PathBuf,
    /// Output directory for model.klm and train_log.csv.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Coordinate bins per axis.
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    #[arg(long, default_value_t = ModelConfig::default().context_len)]
    context_len: usize,
    #[arg(long, default_value_t = ModelConfig::default().d_model)]
    d_model: usize,
    #[arg(long, default_value_t = ModelConfig::default().n_heads)]
    n_heads: usize,
    #[arg(long, default_value_t = ModelConfig::default().n_layers)]
    n_layers: usize,
    #[arg(long, default_value_t = ModelConfig::default().d_ff)]
    d_ff: usize,
    #[arg(long, default_value_t = ModelConfig::default().dropout_rate)]
    dropout: f64,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().max_steps)]
    max_steps: u64,
    #[arg(long, default_value_t = TrainConfig::default().peak_lr)]
    peak_lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().warmup_steps)]
    warmup_steps: u64,
    #[arg(long, default_value_t = TrainConfig::default().min_lr)]
    min_lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().weight_decay)]
    weight_decay: f64,
    #[arg(long, default_value_t = TrainConfig::default().beta1)]
    beta1: f64,
    #[arg(long, default_value_t = TrainConfig::default().beta2)]
    beta2: f64,
    #[arg(long, default_value_t = TrainConfig::default().eps)]
    eps: f64,
    #[arg(long, default_value_t = TrainConfig::default().clip_norm)]
    clip_norm: f64,
    /// Steps between validation passes (the last step is always evaluated).
    #[arg(long, default_value_t = TrainConfig::default().eval_every)]
    eval_every: u64,
    /// Stop after the first validation pass whose Top-1 reaches this value [default: never].
    #[arg(long, value_name = "TOP1")]
    stop_at_top1: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Labeled dataset (JSON lines).
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    /// Metrics JSON; the confusion matrix goes to <stem>_confusion.csv beside it.
    #[arg(long, value_name = "PATH", default_value = "metrics.json")]
    out: PathBuf,
    /// Restrict decoding to the label set.
    #[arg(long)]
    constrained: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum InputFormat {
    /// `record` if the file starts with `{`, otherwise `alphapose`.
    Auto,
    /// Dataset JSON lines; the label field is ignored.
    Record,
    /// AlphaPose results for one video; ten frames are sampled.
    Alphapose,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "PATH")]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = InputFormat::Auto)]
    format: InputFormat,
    /// Which record of a dataset file to use (0-based).
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Restrict decoding to the label set.
    #[arg(long)]
    constrained: bool,
}

#[derive(Debug, Error)]
enum Failure {
    #[error("{0}")]
    Usage(String),
    #[error("{0:#}")]
    Runtime(#[from] anyhow::Error),
}

type Res = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn need_file(path: &Path, flag: &str) -> Res {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("--{flag}: {} is not a readable file", path.display())))
    }
}

fn need_dir(path: &Path, flag: &str) -> Res {
    if path.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("--{flag}: {} is not a directory", path.display())))
    }
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    if !dir.as_os_str().is_empty() {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    Ok(())
}

fn create_parent(path: &Path) -> anyhow::Result<()> {
    create_dir(path.parent().unwrap_or(Path::new("")))
}

fn cmd_synth(a: SynthArgs, g: &Global) -> Res {
    let mut seen = BTreeSet::new();
    if let Some(dup) = a.classes.iter().find(|c| !seen.insert(**c)) {
        return Err(usage(format!("--classes: {dup} is listed twice")));
    }
    let spec = SynthSpec { classes: a.classes, count: a.count, seed: g.seed, noise_sigma: a.noise_sigma };
    spec.validate().map_err(|e| usage(format!("--count/--noise-sigma: {e}")))?;
    let (train, val) = generate_dataset(&spec).context("synthesis failed")?;
    create_dir(&a.out)?;
    write_dataset(&a.out.join("train.jsonl"), &train).context("writing train.jsonl")?;
    write_dataset(&a.out.join("val.jsonl"), &val).context("writing val.jsonl")?;
    println!("train={} val={}", train.len(), val.len());
    Ok(())
}

fn cmd_ingest(a: IngestArgs, g: &Global) -> Res {
    need_dir(&a.alphapose_dir, "alphapose-dir")?;
    need_file(&a.manifest, "manifest")?;
    let opts = IngestOptions { tau: a.tau, margin_frac: a.margin, parallel: !g.deterministic };
    let (seqs, skips) = build_dataset(&a.alphapose_dir, &a.manifest, &opts).context("ingest failed")?;
    create_parent(&a.out)?;
    write_dataset(&a.out, &seqs).context("writing dataset")?;
    let report = a.skip_report.unwrap_or_else(|| {
        let stem = a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into());
        a.out.with_file_name(format!("{stem}_skips.csv"))
    });
    create_parent(&report)?;
    std::fs::write(&report, skips.to_csv()).with_context(|| format!("writing {}", report.display()))?;

    let actions: BTreeSet<&str> = seqs.iter().map(|s| s.label.as_str()).collect();
    let keypoints = seqs
        .iter()
        .flat_map(|s| s.seq.frames.iter())
        .flat_map(|f| f.joints.iter())
        .filter(|k| k.confidence >= a.tau)
        .count();
    println!("videos={} actions={} keypoints={}", seqs.len(), actions.len(), keypoints);
    if !skips.is_empty() {
        eprintln!("skipped {} video(s); see {}", skips.len(), report.display());
    }
    Ok(())
}

fn cmd_train(a: TrainArgs, g: &Global) -> Res {
    need_file(&a.train, "train")?;
    need_file(&a.val, "val")?;
    let train_set = read_dataset(&a.train).with_context(|| format!("reading {}", a.train.display()))?;
    let val_set = read_dataset(&a.val).with_context(|| format!("reading {}", a.val.display()))?;
    let vocab = build_vocab(&train_set, a.bins).map_err(|e| usage(format!("--bins: {e}")))?;
    let model_cfg = ModelConfig {
        vocab_size: vocab.len(),
        context_len: a.context_len,
        d_model: a.d_model,
        n_heads: a.n_heads,
        n_layers: a.n_layers,
        d_ff: a.d_ff,
        dropout_rate: a.dropout,
    };
    let cfg = TrainConfig {
        batch_size: a.batch_size,
        max_steps: a.max_steps,
        peak_lr: a.peak_lr,
        warmup_steps: a.warmup_steps,
        min_lr: a.min_lr,
        weight_decay: a.weight_decay,
        beta1: a.beta1,
        beta2: a.beta2,
        eps: a.eps,
        clip_norm: a.clip_norm,
        seed: g.seed,
        eval_every: a.eval_every,
    };
    model_cfg.validate().map_err(|e| usage(e.to_string()))?;
    cfg.validate().map_err(|e| usage(e.to_string()))?;

    create_dir(&a.out)?;
    let log_path = a.out.join("train_log.csv");
    let ckpt_path = a.out.join("model.klm");
    let file = File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut log = BufWriter::new(file);
    let mut log_err = writeln!(log, "{LOG_HEADER}").err();
    let opts = TrainOptions { parallel: !g.deterministic, stop_at_top1: a.stop_at_top1 };
    let outcome = train(&train_set, &val_set, &vocab, &model_cfg, &cfg, &opts, |row| {
        if log_err.is_none() {
            log_err = writeln!(log, "{}", log_row_csv(row)).and_then(|_| log.flush()).err();
        }
        if let (Some(l), Some(t)) = (row.val_loss, row.val_top1) {
            eprintln!("step {} val_loss={l:.4} val_top1={t}", row.step);
        }
    })
    .context("training failed")?;
    if let Some(e) = log_err {
        return Err(anyhow::Error::new(e).context(format!("writing {}", log_path.display())).into());
    }
    save_checkpoint(&outcome.checkpoint, &ckpt_path).context("saving checkpoint")?;
    let best = outcome.checkpoint.best.as_ref().expect("training always evaluates");
    println!("best_top1={} step={}", best.val_top1, best.step);
    Ok(())
}

fn mode(constrained: bool) -> DecodeMode {
    if constrained {
        DecodeMode::Constrained
    } else {
        DecodeMode::Greedy
    }
}

fn cmd_eval(a: EvalArgs, g: &Global) -> Res {
    need_file(&a.checkpoint, "checkpoint")?;
    need_file(&a.data, "data")?;
    let ck = load_checkpoint(&a.checkpoint).context("loading checkpoint")?;
    let data = read_dataset(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let m = evaluate(&ck.params, &ck.vocab, &data, mode(a.constrained), !g.deterministic).context("evaluation failed")?;
    m.write_report(&a.out).context("writing metrics")?;
    println!("top1={}", m.top1);
    if m.mode == DecodeMode::Greedy {
        eprintln!("{} of {} predictions outside the label set", m.invalid_count(), data.len());
    }
    Ok(())
}

fn read_input(a: &InferArgs) -> anyhow::Result<PoseSequence> {
    let bytes = std::fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let format = match a.format {
        InputFormat::Auto if bytes.iter().find(|b| !b.is_ascii_whitespace()) == Some(&b'{') => InputFormat::Record,
        InputFormat::Auto => InputFormat::Alphapose,
        f => f,
    };
    match format {
        InputFormat::Record => {
            let data = read_dataset(&a.input).with_context(|| format!("parsing {}", a.input.display()))?;
            let n = data.len();
            let rec = data.into_iter().nth(a.index);
            rec.map(|r| r.seq).with_context(|| format!("--index {} but the file holds {n} record(s)", a.index))
        }
        _ => {
            let dets = parse_alphapose(&bytes).with_context(|| format!("parsing {}", a.input.display()))?;
            let id = a.input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let video = group_video(&id, &dets).with_context(|| format!("grouping frames of {id}"))?;
            Ok(sample_frames(&video).with_context(|| format!("sampling frames of {id}"))?)
        }
    }
}

fn cmd_infer(a: InferArgs) -> Res {
    need_file(&a.checkpoint, "checkpoint")?;
    need_file(&a.input, "input")?;
    let ck = load_checkpoint(&a.checkpoint).context("loading checkpoint")?;
    let seq = read_input(&a)?;
    let norm = normalize_sequence(&seq, DEFAULT_TAU, DEFAULT_MARGIN_FRAC).context("normalizing pose sequence")?;
    let prefix = encode_example(&norm, None, &ck.vocab).context("encoding pose sequence")?;
    let trie = build_label_trie(&ck.vocab);
    match predict(&ck.params, &ck.vocab, &trie, &prefix, mode(a.constrained)).context("decoding failed")? {
        Some(label) => println!("{label}"),
        None => {
            let ids = greedy_decode(&ck.params, &prefix, DEFAULT_MAX_LABEL_LEN).context("decoding failed")?;
            let text: Vec<String> = ids.iter().map(|&t| ck.vocab.token_name(t)).collect();
            println!("{}", text.join(" "));
            eprintln!("warning: output is not in the label set");
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Res {
    let g = &cli.global;
    match cli.command {
        Cmd::Synth(a) => cmd_synth(a, g),
        Cmd::Ingest(a) => cmd_ingest(a, g),
        Cmd::Train(a) => cmd_train(*a, g),
        Cmd::Eval(a) => cmd_eval(a, g),
        Cmd::Infer(a) => cmd_infer(a),
    }
}

fn main() -> ExitCode {
    let args = match config::merge_config(&Cli::command(), std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::try_parse_from(args).unwrap_or_else(|e| e.exit());
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Failure::Usage(_) => 2,
                Failure::Runtime(_) => 1,
            })
        }
    }
}
