//! `aesim`: train, evaluate, and inspect sentence-pair inference models.
//!
//! Exit codes: 0 success, 1 usage or configuration problem, 2 data problem
//! (files, parsing, checkpoints), 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aesim_core::checkpoint;
use aesim_core::data::{self, Dataset, Vocab};
use aesim_core::model::{grad_check_model, AlignDirection, Model, ModelConfig, Variant};
use aesim_core::train::{evaluate, train, AdamConfig, TrainConfig};
use aesim_core::{Dtype, Error, Scalar};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "aesim", version, about = "Sentence-pair inference models (plain and attention-boosted)")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write best.ckpt + report.json to --out.
    Train(TrainArgs),
    /// Print `acc=<float>` for a checkpoint on one or more datasets.
    Eval(EvalArgs),
    /// Classify one premise/hypothesis pair, JSON on stdout.
    Predict(PredictArgs),
    /// Write the soft-alignment weight matrix for one pair as JSON.
    ExportAttention(ExportArgs),
    /// Finite-difference gradient self-check on a tiny model.
    GradCheck(GradCheckArgs),
}

#[derive(Copy, Clone, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Copy, Clone, ValueEnum)]
enum VariantArg {
    Esim,
    Aesim,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Variant {
        match v {
            VariantArg::Esim => Variant::Esim,
            VariantArg::Aesim => Variant::Aesim,
        }
    }
}

#[derive(Copy, Clone, ValueEnum)]
enum DirectionArg {
    PremiseRows,
    HypothesisCols,
}

impl From<DirectionArg> for AlignDirection {
    fn from(d: DirectionArg) -> AlignDirection {
        match d {
            DirectionArg::PremiseRows => AlignDirection::PremiseRows,
            DirectionArg::HypothesisCols => AlignDirection::HypothesisCols,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Training data: a .jsonl/.tsv file, or a directory holding train.* and dev.* files.
    #[arg(long)]
    data: PathBuf,
    /// Development data; overrides anything found next to --data.
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Pretrained word vectors (text format: token then values, space separated).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Output directory for best.ckpt and report.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "aesim")]
    variant: VariantArg,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value = "f32")]
    precision: PrecisionArg,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 300)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 300)]
    embed_dim: usize,
    /// Width of the per-word attention projection; defaults to --hidden-dim.
    #[arg(long)]
    attention_dim: Option<usize>,
    #[arg(long, default_value_t = 0.0005)]
    lr: f64,
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    /// Stop after this many epochs without a dev-accuracy improvement.
    #[arg(long)]
    patience: Option<usize>,
    /// Truncate sentences to this many tokens.
    #[arg(long)]
    max_len: Option<usize>,
    /// Drop vocabulary seen fewer than this many times in training data.
    #[arg(long, default_value_t = 1)]
    min_freq: usize,
    /// Silence per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file; repeat the flag for several (one `acc=` line each).
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    premise: String,
    hypothesis: String,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    premise: String,
    #[arg(long)]
    hypothesis: String,
    /// Which side's weights are rows that sum to one.
    #[arg(long, value_enum, default_value = "premise-rows")]
    direction: DirectionArg,
    /// Output JSON file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, value_enum, default_value = "aesim")]
    variant: VariantArg,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Failure threshold on the per-tensor max relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are successes, everything else is usage.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Predict(args) => cmd_predict(args),
        Cmd::ExportAttention(args) => cmd_export_attention(args),
        Cmd::GradCheck(args) => cmd_grad_check(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::ShapeMismatch { .. }
        | Error::InvalidMask { .. }
        | Error::Contract(_)
        | Error::Config(_) => 1,
        Error::Data(_) | Error::Parse { .. } | Error::Io(_) | Error::Checkpoint(_) => 2,
        Error::NonFinite { .. } | Error::Training(_) => 3,
    }
}

/// Accept either a dataset file or a directory containing train.* and dev.*.
fn resolve_data(path: &Path) -> Result<(PathBuf, Option<PathBuf>), Error> {
    if path.is_file() {
        return Ok((path.to_path_buf(), None));
    }
    if !path.is_dir() {
        return Err(Error::Data(format!(
            "--data: no such file or directory: {}",
            path.display()
        )));
    }
    let find = |tag: &str| -> Option<PathBuf> {
        let mut hits: Vec<PathBuf> = std::fs::read_dir(path)
            .ok()?
            .flatten()
            .map(|e| e.path())
            .filter(|p| {
                let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("");
                let ext = p.extension().and_then(|s| s.to_str()).unwrap_or("");
                stem.contains(tag) && matches!(ext, "jsonl" | "json" | "tsv")
            })
            .collect();
        hits.sort();
        hits.into_iter().next()
    };
    let train = find("train").ok_or_else(|| {
        Error::Data(format!(
            "--data: no train.jsonl/train.tsv found in {}",
            path.display()
        ))
    })?;
    Ok((train, find("dev")))
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    if let Some(p) = &args.embeddings {
        if !p.is_file() {
            return Err(Error::Data(format!(
                "--embeddings: file not found: {}",
                p.display()
            )));
        }
    }
    let (train_path, dev_found) = resolve_data(&args.data)?;
    let dev_path = args.dev.or(dev_found);
    match args.precision {
        PrecisionArg::F32 => run_train::<f32>(args, &train_path, dev_path.as_deref()),
        PrecisionArg::F64 => run_train::<f64>(args, &train_path, dev_path.as_deref()),
    }
}

fn run_train<T: Scalar>(
    args: TrainArgs,
    train_path: &Path,
    dev_path: Option<&Path>,
) -> Result<(), Error> {
    let train_set = data::load_pairs(train_path)?;
    let dev_set = match dev_path {
        Some(p) => data::load_pairs(p)?,
        None => {
            eprintln!("note: no dev set given; selecting the best epoch on training data");
            train_set.clone()
        }
    };
    let vocab = Vocab::build(&train_set.pairs, args.min_freq);
    let (embedding, stats) = data::init_embedding::<T>(
        &vocab,
        args.embed_dim,
        args.embeddings.as_deref(),
        args.seed,
    )?;
    if !args.quiet {
        eprintln!(
            "vocab {} tokens ({} from vectors, {} randomly initialized)",
            vocab.len(),
            stats.found,
            stats.missing
        );
    }
    let mut config = ModelConfig::new(
        args.variant.into(),
        args.embed_dim,
        args.hidden_dim,
        train_set.label_names.clone(),
    );
    config.dropout = args.dropout;
    if let Some(d_a) = args.attention_dim {
        config.attention_dim = d_a;
    }
    let mut model = Model::<T>::new(config, vocab, embedding, args.seed)?;

    let tc = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        optimizer: AdamConfig::with_lr(args.lr),
        patience: args.patience,
        max_len: args.max_len,
        seed: args.seed,
        quiet: args.quiet,
    };
    let report = train(&mut model, &train_set, &dev_set, &tc)?;

    std::fs::create_dir_all(&args.out)?;
    let ckpt = args.out.join("best.ckpt");
    checkpoint::save(&ckpt, &model, None, None)?;
    let json = serde_json::json!({
        "variant": model.config.variant.to_string(),
        "precision": T::DTYPE.name(),
        "seed": args.seed,
        "parameter_count": model.parameter_count(),
        "vocab_size": model.vocab.len(),
        "train": {"path": train_path.display().to_string(),
                   "kept": train_set.kept, "dropped": train_set.dropped},
        "epochs": report.epochs.iter().map(|e| serde_json::json!({
            "epoch": e.epoch,
            "train_loss": e.train_loss,
            "dev_accuracy": e.dev_accuracy,
        })).collect::<Vec<_>>(),
        "best_epoch": report.best_epoch,
        "best_dev_accuracy": report.best_dev_accuracy,
    });
    let report_path = args.out.join("report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&json).unwrap())?;
    println!(
        "best dev accuracy {:.4} (epoch {}); wrote {} and {}",
        report.best_dev_accuracy,
        report.best_epoch.map_or("-".into(), |e| e.to_string()),
        ckpt.display(),
        report_path.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    match checkpoint::peek_dtype(&args.checkpoint)? {
        Dtype::F32 => run_eval::<f32>(&args),
        Dtype::F64 => run_eval::<f64>(&args),
    }
}

fn run_eval<T: Scalar>(args: &EvalArgs) -> Result<(), Error> {
    let model = checkpoint::load::<T>(&args.checkpoint)?.model;
    for path in &args.data {
        let ds = data::load_pairs(path)?;
        if ds.label_names != model.config.label_names {
            return Err(Error::Config(format!(
                "dataset {} has labels {:?} but the model classifies {:?}",
                path.display(),
                ds.label_names,
                model.config.label_names
            )));
        }
        let acc = evaluate(&model, &ds, args.batch_size, args.max_len)?;
        println!("acc={acc:.4}");
    }
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<(), Error> {
    match checkpoint::peek_dtype(&args.checkpoint)? {
        Dtype::F32 => run_predict::<f32>(&args),
        Dtype::F64 => run_predict::<f64>(&args),
    }
}

fn run_predict<T: Scalar>(args: &PredictArgs) -> Result<(), Error> {
    let model = checkpoint::load::<T>(&args.checkpoint)?.model;
    let (label, probs) = model.predict_pair(&args.premise, &args.hypothesis)?;
    let probs_json: serde_json::Map<String, serde_json::Value> = model
        .config
        .label_names
        .iter()
        .zip(&probs)
        .map(|(name, p)| (name.clone(), serde_json::json!(p)))
        .collect();
    let out = serde_json::json!({"label": label, "probs": probs_json});
    println!("{}", serde_json::to_string(&out).unwrap());
    Ok(())
}

fn cmd_export_attention(args: ExportArgs) -> Result<(), Error> {
    match checkpoint::peek_dtype(&args.checkpoint)? {
        Dtype::F32 => run_export::<f32>(&args),
        Dtype::F64 => run_export::<f64>(&args),
    }
}

fn run_export<T: Scalar>(args: &ExportArgs) -> Result<(), Error> {
    let model = checkpoint::load::<T>(&args.checkpoint)?.model;
    let export = model.export_alignment(&args.premise, &args.hypothesis, args.direction.into())?;
    let json = serde_json::to_string_pretty(&export).unwrap();
    std::fs::write(&args.out, json)?;
    eprintln!(
        "wrote {} ({} x {} weights)",
        args.out.display(),
        export.weights.len(),
        export.weights.first().map_or(0, Vec::len)
    );
    Ok(())
}

fn cmd_grad_check(args: GradCheckArgs) -> Result<(), Error> {
    // Tiny model at a generic evaluation point: weights are tripled away
    // from the symmetric init, where attention is near uniform and several
    // true gradients sit below the central-difference noise floor.
    let tokens: Vec<String> = ["<pad>", "<oov>", "a", "b", "c", "d", "e", "f", "g", "h"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let labels: Vec<String> = data::NLI_LABELS.iter().map(|s| s.to_string()).collect();
    let vocab = Vocab::from_tokens(tokens)?;
    let config = ModelConfig::new(args.variant.into(), 4, 4, labels);
    let (emb, _) = data::init_embedding::<f64>(&vocab, 4, None, args.seed)?;
    let mut model = Model::new(config, vocab, emb, args.seed)?;
    let names: Vec<String> = model.named().iter().map(|(n, _)| n.clone()).collect();
    for name in &names {
        if name != "embedding" {
            for v in model.param_mut(name).expect("named param").values_mut() {
                *v *= 3.0;
            }
        }
    }
    let pairs: Vec<(Vec<u32>, Vec<u32>, usize)> = vec![
        (vec![4, 7, 2], vec![3, 5], 1),
        (vec![2, 3], vec![6, 4, 8], 0),
        (vec![5, 8, 6], vec![2, 7, 3], 2),
        (vec![7], vec![5, 2], 0),
    ];
    let corrupt = std::env::var("AESIM_GRADCHECK_CORRUPT").ok();
    let report = grad_check_model(&model, &pairs, args.eps, corrupt.as_deref())?;
    let mut worst: Option<(&str, f64)> = None;
    for (name, err) in &report {
        let status = if *err < args.tolerance { "ok" } else { "FAIL" };
        println!("{name:<24} {err:9.3e}  {status}");
        if worst.is_none_or(|(_, w)| *err > w) {
            worst = Some((name, *err));
        }
    }
    let (name, err) = worst.expect("nonempty report");
    if err >= args.tolerance {
        return Err(Error::Training(format!(
            "gradient check failed: {name} at {err:.3e} (tolerance {:.1e})",
            args.tolerance
        )));
    }
    println!("worst {err:.3e} on {name} (tolerance {:.1e})", args.tolerance);
    Ok(())
}
