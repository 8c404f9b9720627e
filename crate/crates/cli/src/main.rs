//! `htr` — batch command-line interface: preprocess a corpus into bundles,
//! train, transcribe single images, and evaluate bundles against a
//! checkpoint.
//!
//! Exit codes: 0 success, 2 input error, 3 numeric divergence,
//! 4 artifact mismatch.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use htr_core::config::{DecodeMode, RunConfig, CONFIG_KEYS};
use htr_core::ctc::CtcDistribution;
use htr_core::error::Error;
use htr_core::model::{ModelConfig, ModelParams};
use htr_core::pipeline::{build_bundles, load_image, Charset, DatasetBundle, SplitSpec};
use htr_core::training::{self, load_checkpoint};

fn config_key_help() -> String {
    let mut s = String::from("Configuration keys (key=value file given via --config):\n");
    for (key, default, doc) in CONFIG_KEYS {
        s.push_str(&format!("  {key:<24} {doc} [default: {default}]\n"));
    }
    s
}

#[derive(Parser)]
#[command(
    name = "htr",
    about = "Offline handwritten-text recognition: gated-CNN encoder, additive attention, bidirectional GRU decoder, CTC objective",
    after_long_help = config_key_help()
)]
struct Cli {
    /// Run configuration file (key=value lines); defaults apply when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configuration seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the worker thread cap (0 = all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Print the full effective configuration and exit
    #[arg(long, global = true)]
    dump_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Build dataset bundles from an image corpus (directory with PNG/PGM
    /// files and a labels.tsv of "id<TAB>transcript" lines)
    Preprocess {
        /// Corpus directory
        #[arg(long)]
        corpus: PathBuf,
        /// Output directory for <split>.htrb bundles
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a bundle pair, keeping the best-validation checkpoint
    Train {
        /// Training bundle (.htrb)
        #[arg(long)]
        train: PathBuf,
        /// Validation bundle (.htrb)
        #[arg(long)]
        valid: PathBuf,
        /// Output directory (best.htrf, last.htrf, train_log.tsv)
        #[arg(long)]
        out: PathBuf,
        /// Continue from a previous last.htrf; epoch numbering continues
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Transcribe one image and print the text
    Transcribe {
        /// Checkpoint file (.htrf)
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image file (PNG/PGM)
        #[arg(long)]
        image: PathBuf,
        #[command(flatten)]
        decode: DecodeArgs,
        /// Also print the top-K class probabilities per time step
        #[arg(long, value_name = "K")]
        top_probs: Option<usize>,
    },
    /// Transcribe a whole bundle and write a TSV report
    Evaluate {
        /// Checkpoint file (.htrf)
        #[arg(long)]
        checkpoint: PathBuf,
        /// Bundle to evaluate (.htrb)
        #[arg(long)]
        bundle: PathBuf,
        /// Report output path (TSV)
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        decode: DecodeArgs,
    },
}

#[derive(Args)]
struct DecodeArgs {
    /// Best-path decoding (the default comes from the config)
    #[arg(long, conflicts_with = "beam")]
    greedy: bool,
    /// Prefix beam search with this width
    #[arg(long, value_name = "WIDTH")]
    beam: Option<usize>,
}

impl DecodeArgs {
    fn resolve(&self, cfg: &RunConfig) -> DecodeMode {
        if self.greedy {
            DecodeMode::Greedy
        } else if let Some(w) = self.beam {
            DecodeMode::Beam(w)
        } else {
            cfg.decode_mode()
        }
    }
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged(_) | Error::NonFinite(_) => 3,
        Error::Mismatch(_) => 4,
        _ => 2,
    }
}

fn dispatch(cli: Cli) -> htr_core::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    cfg.validate()?;
    htr_core::configure_threads(cfg.threads);

    if cli.dump_config {
        print!("{}", cfg.dump());
        return Ok(());
    }

    let command = cli.command.ok_or_else(|| {
        Error::Usage("a subcommand is required (preprocess | train | transcribe | evaluate)".into())
    })?;

    match command {
        Command::Preprocess { corpus, out } => cmd_preprocess(&cfg, &corpus, &out),
        Command::Train { train, valid, out, resume } => {
            cmd_train(&cfg, &train, &valid, &out, resume.as_deref())
        }
        Command::Transcribe { checkpoint, image, decode, top_probs } => {
            cmd_transcribe(&cfg, &checkpoint, &image, decode.resolve(&cfg), top_probs)
        }
        Command::Evaluate { checkpoint, bundle, report, decode } => {
            cmd_evaluate(&cfg, &checkpoint, &bundle, &report, decode.resolve(&cfg))
        }
    }
}

fn cmd_preprocess(cfg: &RunConfig, corpus: &std::path::Path, out: &std::path::Path) -> htr_core::Result<()> {
    let charset = cfg.load_charset()?;
    let spec = SplitSpec {
        names: cfg.split_names.clone(),
        fractions: cfg.split_fractions.clone(),
        word_disjoint_test: cfg.word_disjoint_test,
        seed: cfg.seed,
    };
    let summaries = build_bundles_checked(cfg, corpus, out, &charset, &spec)?;
    println!(
        "preprocessed {} samples into {} bundles (charset: {} symbols, hash {})",
        summaries.iter().map(|s| s.sample_count).sum::<usize>(),
        summaries.len(),
        charset.len(),
        charset.hash_hex()
    );
    for s in &summaries {
        println!("  {}: {} samples -> {}", s.split, s.sample_count, s.path.display());
    }
    Ok(())
}

/// Bundle building plus the transcript-length cap from the configuration.
fn build_bundles_checked(
    cfg: &RunConfig,
    corpus: &std::path::Path,
    out: &std::path::Path,
    charset: &Charset,
    spec: &SplitSpec,
) -> htr_core::Result<Vec<htr_core::pipeline::BundleSummary>> {
    for entry in htr_core::pipeline::load_corpus_index(corpus)? {
        let len = htr_core::metrics::nfc(&entry.transcript).chars().count();
        if len > cfg.max_label_len {
            return Err(Error::Corpus(format!(
                "sample {:?}: transcript has {len} characters, max_label_len is {}",
                entry.id, cfg.max_label_len
            )));
        }
    }
    build_bundles(corpus, out, charset, spec, cfg.input_width, cfg.input_height)
}

fn cmd_train(
    cfg: &RunConfig,
    train: &std::path::Path,
    valid: &std::path::Path,
    out: &std::path::Path,
    resume: Option<&std::path::Path>,
) -> htr_core::Result<()> {
    let train_bundle = DatasetBundle::load(train)?;
    let valid_bundle = DatasetBundle::load(valid)?;
    println!(
        "training: lr={} batch_size={} patience={} seed={} ({} train / {} valid samples)",
        cfg.learning_rate,
        cfg.batch_size,
        cfg.patience,
        cfg.seed,
        train_bundle.samples.len(),
        valid_bundle.samples.len()
    );
    let outcome = training::train(cfg, &train_bundle, &valid_bundle, out, resume, &mut |r| {
        println!(
            "epoch {:>4}  train_loss={:.6}  val_loss={:.6}  ({:.1}s)",
            r.epoch, r.train_loss, r.val_loss, r.seconds
        );
    })?;
    println!(
        "done: best val_loss {:.6} at epoch {} ({}); checkpoints in {}",
        outcome.best_val_loss,
        outcome.best_epoch,
        if outcome.stopped_early { "early stop" } else { "epoch cap" },
        out.display()
    );
    Ok(())
}

fn load_model(
    cfg: &RunConfig,
    checkpoint: &std::path::Path,
) -> htr_core::Result<(ModelParams, ModelConfig, Charset)> {
    let ckpt = load_checkpoint(checkpoint, cfg)?;
    let model_cfg = ModelConfig::from_run(cfg, ckpt.charset.len())?;
    Ok((ckpt.params, model_cfg, ckpt.charset))
}

fn cmd_transcribe(
    cfg: &RunConfig,
    checkpoint: &std::path::Path,
    image_path: &std::path::Path,
    decode: DecodeMode,
    top_probs: Option<usize>,
) -> htr_core::Result<()> {
    let (params, model_cfg, charset) = load_model(cfg, checkpoint)?;
    let image = load_image(image_path)
        .map_err(|e| Error::Corpus(format!("cannot read image {}: {e}", image_path.display())))?;
    let (text, dist) =
        training::transcribe(&params, &model_cfg, &charset, &image, cfg.invert_colors, decode)?;
    println!("{text}");
    if let Some(k) = top_probs {
        print_top_probs(&dist, &charset, k);
    }
    Ok(())
}

fn print_top_probs(dist: &CtcDistribution, charset: &Charset, k: usize) {
    for t in 0..dist.time_steps() {
        let row = dist.row(t);
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
        let cells: Vec<String> = order
            .iter()
            .take(k)
            .map(|&c| {
                let label = match charset.char_at(c) {
                    Some(ch) => format!("{ch:?}"),
                    None => "<blank>".to_string(),
                };
                format!("{label}={:.4}", row[c])
            })
            .collect();
        eprintln!("t={t:<4} {}", cells.join("  "));
    }
}

fn cmd_evaluate(
    cfg: &RunConfig,
    checkpoint: &std::path::Path,
    bundle_path: &std::path::Path,
    report_path: &std::path::Path,
    decode: DecodeMode,
) -> htr_core::Result<()> {
    let (params, model_cfg, charset) = load_model(cfg, checkpoint)?;
    let bundle = DatasetBundle::load(bundle_path)?;
    let report = training::evaluate(
        &params,
        &model_cfg,
        &charset,
        &bundle,
        decode,
        cfg.invert_colors,
        cfg.batch_size,
    )?;
    let mut buf = Vec::new();
    report.write_tsv(&mut buf)?;
    std::fs::write(report_path, buf)?;
    println!(
        "{} & {:.3} & {:.3} & {:.3} ({} samples) -> {}",
        bundle.manifest.split,
        report.cer,
        report.wer,
        report.ser,
        report.sample_count(),
        report_path.display()
    );
    Ok(())
}
