use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use twoinone::config::read_kv;
use twoinone::corpus::{generate_synthetic, load_hotpotqa, save_hotpotqa, QAExample, SynthConfig};
use twoinone::encoder::{EncoderConfig, ModelParams};
use twoinone::encoding::{build_vocab, Vocab};
use twoinone::evaluation::evaluate;
use twoinone::heads::Supervision;
use twoinone::inference::{consistency_gap, InferenceConfig, PredictionFile, Scorer};
use twoinone::training::{build_pairs, load_checkpoint, save_checkpoint, TrainConfig, Trainer};
use twoinone::Error;

/// Joint passage ranking and supporting-fact selection.
#[derive(Parser)]
#[command(name = "twoinone", version)]
struct Cli {
    /// Worker threads for scoring (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic corpus in HotpotQA format.
    GenSynth {
        /// key=value generator settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one generator setting, e.g. --set n_questions=128.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a vocabulary file from a corpus.
    BuildVocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30_000)]
        max_size: usize,
    },
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score a corpus with a joint model and write predictions.
    Predict {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        infer: InferArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a single-head baseline heuristic and write predictions.
    Baseline {
        #[arg(long, value_enum)]
        mode: BaselineMode,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        infer: InferArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a prediction file against a gold corpus.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        format: ReportFormat,
        /// Write the report here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the mean gap between passage logits and the best sentence logit.
    GapStats {
        #[command(flatten)]
        model: ModelArgs,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// key=value training and architecture settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. --set learning_rate=5e-4.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, value_enum)]
    mode: Option<TrainMode>,
    /// Disable the consistency constraint.
    #[arg(long)]
    no_con: bool,
    /// Disable the similarity constraint.
    #[arg(long)]
    no_sim: bool,
    /// Loss weights as JOINT,CON,SIM.
    #[arg(long, value_name = "J,C,S")]
    weights: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint written with the same settings.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Token budget per input (default: the encoder's maximum).
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long, default_value_t = 2)]
    top_k: usize,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    threshold: f64,
    /// Always select the best sentence of each chosen passage.
    #[arg(long)]
    force_nonempty: bool,
}

impl InferArgs {
    fn config(&self) -> InferenceConfig {
        InferenceConfig {
            top_k: self.top_k,
            sentence_threshold: self.threshold,
            force_nonempty: self.force_nonempty,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainMode {
    Joint,
    Sentence,
    Passage,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineMode {
    Sentence,
    Passage,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ReportFormat {
    Text,
    Json,
}

fn split_kv(s: &str) -> anyhow::Result<(&str, &str)> {
    match s.split_once('=') {
        Some((k, v)) => Ok((k.trim(), v.trim())),
        None => bail!(Error::Config(format!("expected KEY=VALUE, got {s:?}"))),
    }
}

/// Config file entries first, then `--set` overrides, in order.
fn settings(config: Option<&Path>, overrides: &[String]) -> anyhow::Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = match config {
        Some(p) => read_kv(p)?.into_iter().collect(),
        None => Vec::new(),
    };
    for o in overrides {
        let (k, v) = split_kv(o)?;
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn load_corpus(path: &Path) -> anyhow::Result<Vec<QAExample>> {
    let loaded = load_hotpotqa(path)?;
    if loaded.dropped_sp > 0 {
        warn!("{}: dropped {} unresolvable supporting facts", path.display(), loaded.dropped_sp);
    }
    Ok(loaded.examples)
}

fn gen_synth(config: Option<&Path>, overrides: &[String], seed: u64, out: &Path) -> anyhow::Result<()> {
    let mut cfg = SynthConfig::default();
    for (k, v) in settings(config, overrides)? {
        if !cfg.apply(&k, &v)? {
            bail!(Error::Config(format!("unknown generator setting {k}")));
        }
    }
    let corpus = generate_synthetic(&cfg, seed)?;
    save_hotpotqa(out, &corpus)?;
    info!("wrote {} questions to {}", corpus.len(), out.display());
    Ok(())
}

fn train(args: &TrainArgs) -> anyhow::Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let vocab = Vocab::load(&args.vocab)?;
    let mut cfg = TrainConfig::default();
    let mut enc = EncoderConfig::desk_scale(vocab.len());
    for (k, v) in settings(args.config.as_deref(), &args.overrides)? {
        if !cfg.apply(&k, &v)? && !enc.apply(&k, &v)? {
            bail!(Error::Config(format!("unknown training setting {k}")));
        }
    }
    if let Some(m) = args.mode {
        cfg.weights.supervision = match m {
            TrainMode::Joint => Supervision::Joint,
            TrainMode::Sentence => Supervision::SentenceOnly,
            TrainMode::Passage => Supervision::PassageOnly,
        };
    }
    if args.no_con {
        cfg.weights.use_con = false;
    }
    if args.no_sim {
        cfg.weights.use_sim = false;
    }
    if let Some(w) = &args.weights {
        let parts: Vec<&str> = w.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            bail!(Error::Config(format!("--weights expects JOINT,CON,SIM, got {w:?}")));
        }
        for (key, v) in ["lambda_joint", "lambda_con", "lambda_sim"].iter().zip(parts) {
            cfg.apply(key, v)?;
        }
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    enc.seed = cfg.seed;
    enc.max_len = cfg.max_len;

    let mut trainer = match &args.resume {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            if ckpt.encoder.vocab_size != vocab.len() {
                bail!(Error::Incompatible(format!(
                    "checkpoint vocabulary has {} entries, {} has {}",
                    ckpt.encoder.vocab_size,
                    args.vocab.display(),
                    vocab.len()
                )));
            }
            Trainer::from_checkpoint(ckpt, cfg.clone())?
        }
        None => Trainer::new(enc, cfg.clone())?,
    };
    let pairs = build_pairs(&corpus, &vocab, trainer.encoder.max_len, cfg.weights.supervision)?;
    info!(
        "training on {} pairs, {} parameters, mode {}",
        pairs.len(),
        trainer.params.num_values(),
        cfg.weights.supervision.as_str()
    );
    if trainer.epoch < cfg.epochs as u64 {
        trainer.run(&pairs)?;
    }
    save_checkpoint(&args.out, &trainer.checkpoint())?;
    info!("wrote checkpoint {}", args.out.display());
    Ok(())
}

struct Loaded {
    params: ModelParams,
    encoder: EncoderConfig,
    vocab: Vocab,
    corpus: Vec<QAExample>,
    max_len: usize,
}

impl Loaded {
    fn new(m: &ModelArgs) -> anyhow::Result<Self> {
        let ckpt = load_checkpoint(&m.checkpoint)?;
        let vocab = Vocab::load(&m.vocab)?;
        if vocab.len() != ckpt.encoder.vocab_size {
            bail!(Error::Incompatible(format!(
                "checkpoint expects {} vocabulary entries, {} has {}",
                ckpt.encoder.vocab_size,
                m.vocab.display(),
                vocab.len()
            )));
        }
        let corpus = load_corpus(&m.corpus)?;
        Ok(Self {
            max_len: m.max_len.unwrap_or(ckpt.encoder.max_len),
            params: ckpt.params,
            encoder: ckpt.encoder,
            vocab,
            corpus,
        })
    }

    fn scorer(&self) -> Scorer<'_> {
        Scorer {
            params: &self.params,
            encoder: &self.encoder,
            vocab: &self.vocab,
            max_len: self.max_len,
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match cli.command {
        Command::GenSynth {
            config,
            overrides,
            seed,
            out,
        } => gen_synth(config.as_deref(), &overrides, seed, &out),
        Command::BuildVocab { corpus, out, max_size } => {
            let vocab = build_vocab(&load_corpus(&corpus)?, max_size)?;
            vocab.save(&out)?;
            info!("wrote {} vocabulary entries to {}", vocab.len(), out.display());
            Ok(())
        }
        Command::Train(args) => train(&args),
        Command::Predict { model, infer, out } => {
            let m = Loaded::new(&model)?;
            let preds = m.scorer().predict_corpus(&m.corpus, &infer.config())?;
            PredictionFile::from_predictions(&preds).save(&out)?;
            info!("wrote predictions for {} questions to {}", preds.len(), out.display());
            Ok(())
        }
        Command::Baseline { mode, model, infer, out } => {
            let m = Loaded::new(&model)?;
            let cfg = infer.config();
            let preds = match mode {
                BaselineMode::Sentence => m.scorer().sentence_baseline_corpus(&m.corpus, &cfg)?,
                BaselineMode::Passage => m.scorer().passage_baseline_corpus(&m.corpus, &cfg)?,
            };
            PredictionFile::from_predictions(&preds).save(&out)?;
            info!("wrote predictions for {} questions to {}", preds.len(), out.display());
            Ok(())
        }
        Command::Evaluate { pred, gold, format, out } => {
            let preds = PredictionFile::load(&pred)?;
            let metrics = evaluate(&preds, &load_corpus(&gold)?);
            let report = match format {
                ReportFormat::Text => metrics.to_table(),
                ReportFormat::Json => metrics.to_json() + "\n",
            };
            match out {
                Some(p) => std::fs::write(&p, report).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{report}"),
            }
            Ok(())
        }
        Command::GapStats { model } => {
            let m = Loaded::new(&model)?;
            let scored = m.scorer().score_corpus(&m.corpus)?;
            let g = consistency_gap(scored.iter().flatten());
            println!("mean_gap\tpairs\tskipped");
            println!("{:.6}\t{}\t{}", g.mean_gap, g.pairs, g.skipped);
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_numeric() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
