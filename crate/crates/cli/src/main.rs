//! `tvlab`: the tweet sentiment pipeline as a single command-line tool.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use tvlab::analyze::{analyze_model, coords_tsv, render_scatter, AnalysisConfig};
use tvlab::corpus::{build_electra_pairs, load_corpus, save_corpus, split_validation, TweetRecord};
use tvlab::evaluate::evaluate_model;
use tvlab::model::{extend_embeddings, init_model, load_checkpoint, save_checkpoint, Checkpoint};
use tvlab::pipeline::{encode_records, normalize_records, run_demo, texts, validate_config, DemoConfig, PipelineConfig};
use tvlab::preprocess::PreprocessRules;
use tvlab::rng;
use tvlab::tokenizer::{audit_unknowns, augment_vocab, encode, load_vocab, save_vocab, TokenId, UnknownAudit, Vocab};
use tvlab::train::{finetune_records, generator_config, pretrain_electra, pretrain_mlm, TrainLog};

const SEED_VAR: &str = "TVLAB_SEED";

#[derive(Parser)]
#[command(name = "tvlab", version, about = "Desk-scale tweet sentiment pipeline")]
struct Cli {
    /// Worker threads for batch and evaluation parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize a raw corpus TSV, keeping ids and labels.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Placeholder for collapsed mention runs; `{}` is the run length.
        #[arg(long, default_value = "mention_{}")]
        mention_template: String,
    },
    /// Vocabulary auditing and emoticon augmentation.
    Vocab {
        #[command(subcommand)]
        command: VocabCommand,
    },
    /// Pretrain an encoder with masked language modeling or ELECTRA.
    Pretrain {
        objective: Objective,
        #[command(flatten)]
        args: PretrainArgs,
    },
    /// Fine-tune a checkpoint for three-way sentiment classification.
    Finetune(FinetuneArgs),
    /// Classify a labeled test set and report accuracy.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Defaults to the `.vocab` file beside the checkpoint.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Summary and confusion matrix; printed to stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Project `[CLS]` vectors with PCA and t-SNE and draw them.
    Analyze {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        pca_dims: usize,
        #[arg(long, default_value_t = 30.0)]
        perplexity: f64,
        #[arg(long, default_value_t = 1000)]
        iterations: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        svg: PathBuf,
        #[arg(long)]
        coords: Option<PathBuf>,
    },
    /// Run the whole pipeline on generated fixtures.
    Demo {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Parse a configuration file and print it with defaults applied.
    ValidateConfig { path: PathBuf },
}

#[derive(Subcommand)]
enum VocabCommand {
    /// Count corpus words that encode to `[UNK]`.
    Audit {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Emoticons listed in the summary on stderr.
        #[arg(long, default_value_t = 70)]
        top: usize,
        /// Audit TSV; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Append the most frequent unknown emoticons to a vocabulary.
    Augment {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        audit: PathBuf,
        #[arg(short = 'k', default_value_t = 70)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint whose embedding rows are extended to the new vocabulary.
        #[arg(long, requires = "model_out")]
        model: Option<PathBuf>,
        #[arg(long, requires = "model")]
        model_out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Objective {
    Mlm,
    Electra,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Starting checkpoint, or `random`.
    #[arg(long, default_value = "random")]
    init: String,
    /// Required with `--init random`; otherwise defaults to the checkpoint's
    /// `.vocab` file.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    valid_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    init: String,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Bad invocation detected after argument parsing.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// `--seed`, else `TVLAB_SEED`, else `fallback`.
fn resolve_seed(flag: Option<u64>, fallback: u64) -> anyhow::Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_VAR) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| usage(format!("{SEED_VAR}='{v}' is not a non-negative integer"))),
        Err(_) => Ok(fallback),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = OsString::from(path.as_os_str());
    name.push(suffix);
    PathBuf::from(name)
}

fn sibling_vocab(ckpt: &Path) -> PathBuf {
    with_suffix(ckpt, ".vocab")
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn check_fingerprint(ckpt: &Checkpoint, vocab: &Vocab, vocab_path: &Path) -> anyhow::Result<()> {
    if ckpt.vocab_fingerprint != vocab.fingerprint() {
        bail!(
            "vocabulary {} does not match the checkpoint (fingerprint {:016x}, expected {:016x})",
            vocab_path.display(),
            vocab.fingerprint(),
            ckpt.vocab_fingerprint
        );
    }
    if ckpt.config().vocab_size != vocab.len() {
        bail!(
            "checkpoint has {} embedding rows for {} vocabulary entries",
            ckpt.config().vocab_size,
            vocab.len()
        );
    }
    Ok(())
}

/// Loads a checkpoint with its vocabulary (explicit or sibling file).
fn load_model(path: &Path, vocab: Option<&Path>) -> anyhow::Result<(Checkpoint, Vocab)> {
    let ckpt = load_checkpoint(path)?;
    let vocab_path = vocab.map_or_else(|| sibling_vocab(path), Path::to_path_buf);
    let vocab = load_vocab(&vocab_path)?;
    check_fingerprint(&ckpt, &vocab, &vocab_path)?;
    Ok((ckpt, vocab))
}

/// Saves a checkpoint together with its `.vocab` sibling.
fn save_model(ckpt: &Checkpoint, vocab: &Vocab, path: &Path) -> anyhow::Result<()> {
    save_checkpoint(ckpt, path)?;
    save_vocab(vocab, sibling_vocab(path))?;
    Ok(())
}

fn load_normalized(path: &Path, labeled: bool) -> anyhow::Result<Vec<TweetRecord>> {
    let records = load_corpus(path, labeled)?;
    Ok(normalize_records(&records, &PreprocessRules::default()))
}

fn load_config(config: Option<&Path>, paths: &[(&str, &Path)]) -> anyhow::Result<PipelineConfig> {
    let (text, base) = match config {
        Some(p) => (
            fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            p.parent().unwrap_or(Path::new(".")).to_path_buf(),
        ),
        None => (String::new(), PathBuf::from(".")),
    };
    let (cfg, defaults) = PipelineConfig::parse_with(&text, &base, paths)?;
    if config.is_some() {
        for d in &defaults {
            eprintln!("default: {d}");
        }
    }
    Ok(cfg.resolve()?)
}

/// Starting point for training: a fresh model or a checkpoint, with the
/// vocabulary it is indexed by.
fn starting_model(
    init: &str,
    vocab_flag: Option<&Path>,
) -> anyhow::Result<(Option<Checkpoint>, PathBuf)> {
    if init == "random" {
        let vocab = vocab_flag.ok_or_else(|| usage("--vocab is required with --init random"))?;
        Ok((None, vocab.to_path_buf()))
    } else {
        let path = Path::new(init);
        let (ckpt, _) = load_model(path, vocab_flag)?;
        Ok((Some(ckpt), vocab_flag.map_or_else(|| sibling_vocab(path), Path::to_path_buf)))
    }
}

fn report_log(name: &str, log: &TrainLog) {
    let metric = log.evals.last().map_or(f64::NAN, |e| e.metric);
    eprintln!("{name}: {} steps, last validation metric {metric:.4}", log.steps.len());
    if let Some(s) = &log.selected {
        eprintln!("{name}: selected epoch {} (step {}, metric {:.4})", s.epoch, s.step, s.metric);
    }
}

fn pretrain(objective: Objective, a: &PretrainArgs) -> anyhow::Result<()> {
    let (init, vocab_path) = starting_model(&a.init, a.vocab.as_deref())?;
    let mut cfg = load_config(a.config.as_deref(), &[("corpus", &a.corpus), ("vocab", &vocab_path)])?;
    let seed = resolve_seed(a.seed, cfg.seed)?;
    cfg.pretrain.seed = seed;
    let vocab = load_vocab(&vocab_path)?;
    let init = match init {
        Some(c) => c,
        None => init_model(&cfg.model, rng::derive(seed, rng::stream::INIT, 0))?.with_fingerprint(vocab.fingerprint()),
    };
    let max_len = cfg.max_len.min(init.config().max_seq_len);
    let records = load_normalized(&a.corpus, false)?;
    let split = split_validation(&records, a.valid_size.unwrap_or(cfg.valid_size), seed);
    let (ckpt, log) = match objective {
        Objective::Mlm => pretrain_mlm(
            &init,
            &encode_records(&split.train, &vocab, max_len),
            &encode_records(&split.validation, &vocab, max_len),
            &cfg.pretrain,
        )?,
        Objective::Electra => {
            let pairs = |r: &[TweetRecord]| -> Vec<Vec<TokenId>> {
                build_electra_pairs(&texts(r))
                    .iter()
                    .map(|t| encode(t, &vocab, max_len).real_ids())
                    .collect()
            };
            let gen_seed = rng::derive(seed, rng::stream::INIT, 1);
            let generator = init_model(&generator_config(init.config()), gen_seed)?.with_fingerprint(vocab.fingerprint());
            let outcome = pretrain_electra(&generator, &init, &pairs(&split.train), &pairs(&split.validation), &cfg.pretrain)?;
            save_model(&outcome.generator, &vocab, &with_suffix(&a.out, ".generator"))?;
            (outcome.discriminator, outcome.log)
        }
    };
    save_model(&ckpt, &vocab, &a.out)?;
    write(&with_suffix(&a.out, ".log.tsv"), &log.to_tsv())?;
    report_log("pretrain", &log);
    Ok(())
}

fn finetune(a: &FinetuneArgs) -> anyhow::Result<()> {
    let (init, vocab_path) = starting_model(&a.init, a.vocab.as_deref())?;
    let mut cfg = load_config(a.config.as_deref(), &[("corpus", &a.train), ("vocab", &vocab_path)])?;
    let seed = resolve_seed(a.seed, cfg.seed)?;
    cfg.finetune.seed = seed;
    let vocab = load_vocab(&vocab_path)?;
    let init = match init {
        Some(c) => c,
        None => init_model(&cfg.model, rng::derive(seed, rng::stream::INIT, 0))?.with_fingerprint(vocab.fingerprint()),
    };
    let max_len = cfg.max_len.min(init.config().max_seq_len);
    let records = load_normalized(&a.train, true)?;
    let split = split_validation(&records, a.valid_size.unwrap_or(cfg.valid_size), seed);
    let (ckpt, log) = finetune_records(&init, &split.train, &split.validation, &vocab, max_len, &cfg.finetune)?;
    save_model(&ckpt, &vocab, &a.out)?;
    write(&with_suffix(&a.out, ".log.tsv"), &log.to_tsv())?;
    report_log("finetune", &log);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Preprocess {
            input,
            out,
            mention_template,
        } => {
            let rules = PreprocessRules::default().with_mention_template(&mention_template)?;
            let records = load_corpus(&input, false)?;
            save_corpus(&normalize_records(&records, &rules), &out)?;
            eprintln!("preprocessed {} records", records.len());
        }
        Command::Vocab { command } => match command {
            VocabCommand::Audit {
                corpus,
                vocab,
                top,
                out,
            } => {
                let vocab = load_vocab(&vocab)?;
                let records = load_normalized(&corpus, false)?;
                let audit = audit_unknowns(&texts(&records), &vocab);
                eprintln!(
                    "{} distinct unknown words, {} of them emoticons",
                    audit.unique_unknowns(),
                    audit.emoticons.len()
                );
                for (e, n) in audit.ranked_emoticons().into_iter().take(top) {
                    eprintln!("{e}\t{n}");
                }
                match out {
                    Some(p) => write(&p, &audit.serialize())?,
                    None => print!("{}", audit.serialize()),
                }
            }
            VocabCommand::Augment {
                vocab: vocab_path,
                audit,
                k,
                out,
                model,
                model_out,
                seed,
            } => {
                let vocab = load_vocab(&vocab_path)?;
                let text = fs::read_to_string(&audit).with_context(|| format!("reading {}", audit.display()))?;
                let augmented = augment_vocab(&vocab, &UnknownAudit::parse(&text)?, k);
                save_vocab(&augmented, &out)?;
                eprintln!("added {} tokens ({} total)", augmented.len() - vocab.len(), augmented.len());
                if let (Some(model), Some(model_out)) = (model, model_out) {
                    let ckpt = load_checkpoint(&model)?;
                    check_fingerprint(&ckpt, &vocab, &vocab_path)?;
                    let seed = rng::derive(resolve_seed(seed, 0)?, rng::stream::EXTEND, 0);
                    let extended = extend_embeddings(&ckpt, augmented.len(), seed)?.with_fingerprint(augmented.fingerprint());
                    save_model(&extended, &augmented, &model_out)?;
                }
            }
        },
        Command::Pretrain { objective, args } => pretrain(objective, &args)?,
        Command::Finetune(args) => finetune(&args)?,
        Command::Eval {
            model,
            test,
            vocab,
            report,
            predictions,
        } => {
            let (ckpt, vocab) = load_model(&model, vocab.as_deref())?;
            let records = load_normalized(&test, true)?;
            let result = evaluate_model(&ckpt, &records, &vocab, ckpt.config().max_seq_len)?;
            match report {
                Some(p) => write(&p, &result.to_tsv())?,
                None => print!("{}", result.to_tsv()),
            }
            if let Some(p) = predictions {
                write(&p, &result.predictions_tsv())?;
            }
            eprintln!("accuracy {:.4} on {} tweets", result.accuracy, result.predictions.len());
        }
        Command::Analyze {
            model,
            test,
            vocab,
            pca_dims,
            perplexity,
            iterations,
            seed,
            svg,
            coords,
        } => {
            let (ckpt, vocab) = load_model(&model, vocab.as_deref())?;
            let records = load_normalized(&test, true)?;
            let config = AnalysisConfig {
                pca_dims,
                perplexity,
                iterations,
                seed: resolve_seed(seed, 0)?,
                ..AnalysisConfig::default()
            };
            let analysis = analyze_model(&ckpt, &records, &vocab, ckpt.config().max_seq_len, &config)?;
            if analysis.pca_dims < pca_dims {
                eprintln!("PCA reduced to {} dimensions (requested {pca_dims})", analysis.pca_dims);
            }
            eprintln!("t-SNE KL {:.4} -> {:.4}", analysis.tsne.initial_kl, analysis.tsne.final_kl);
            render_scatter(&analysis.points, &svg)?;
            if let Some(p) = coords {
                write(&p, &coords_tsv(&analysis.points))?;
            }
        }
        Command::Demo { seed, out, quiet } => {
            let mut config = DemoConfig::new(resolve_seed(seed, 0)?);
            config.verbose = !quiet;
            let outcome = run_demo(&config, &out)?;
            print!("{}", outcome.report);
        }
        Command::ValidateConfig { path } => {
            let config = validate_config(&path)?;
            println!("{config:#?}");
        }
    }
    Ok(())
}

/// The error chain, skipping causes already quoted by an outer message.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(1);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
    }
}
