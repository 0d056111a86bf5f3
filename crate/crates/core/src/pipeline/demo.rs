use std::fs;
use std::path::{Path, PathBuf};

use super::fixtures;
use super::{encode_records, normalize_records, texts};
use crate::analyze::{analyze_model, coords_tsv, render_scatter, Analysis, AnalysisConfig};
use crate::corpus::{save_corpus, split_validation};
use crate::evaluate::{evaluate_model, results_table, EvalReport, ResultsRow};
use crate::model::{init_model, save_checkpoint, Checkpoint, ModelConfig};
use crate::preprocess::PreprocessRules;
use crate::rng;
use crate::tokenizer::{is_emoticon_char, save_vocab, Vocab};
use crate::train::{finetune_records, pretrain_mlm, pretrain_with_augmented_vocab, TrainConfig, TrainLog};
use crate::{Error, Result};

pub const EXPERIMENTS: [&str; 3] = ["Base", "Pre", "Pre+Emo"];

/// Sizes and hyperparameters of the demo run.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoConfig {
    pub seed: u64,
    pub generic: usize,
    pub unlabeled: usize,
    pub train: usize,
    pub valid_size: usize,
    pub test: usize,
    pub max_len: usize,
    pub hidden: usize,
    pub base_epochs: usize,
    pub continued_epochs: usize,
    pub finetune_epochs: usize,
    pub pretrain_lr: f64,
    pub finetune_lr: f64,
    pub emoticons: usize,
    pub analysis: AnalysisConfig,
    pub verbose: bool,
}

impl DemoConfig {
    pub fn new(seed: u64) -> Self {
        DemoConfig {
            seed,
            generic: 800,
            unlabeled: 1200,
            train: 700,
            valid_size: 100,
            test: 300,
            max_len: 40,
            hidden: 32,
            base_epochs: 6,
            continued_epochs: 4,
            finetune_epochs: 15,
            pretrain_lr: 1e-3,
            finetune_lr: 1e-3,
            emoticons: 70,
            analysis: AnalysisConfig {
                seed,
                ..AnalysisConfig::default()
            },
            verbose: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DemoOutcome {
    /// Results table (TSV) with one column per experiment.
    pub report: String,
    pub reports: Vec<(&'static str, EvalReport)>,
    /// Experiment whose fine-tuned model was projected.
    pub analyzed: &'static str,
    pub analysis: Analysis,
    pub files: Vec<PathBuf>,
}

fn has_emoticon(text: &str) -> bool {
    text.chars().any(is_emoticon_char)
}

fn accuracy_on(report: &EvalReport, keep: &[bool]) -> f64 {
    let kept: Vec<_> = report
        .predictions
        .iter()
        .zip(keep)
        .filter(|(_, &k)| k)
        .map(|(p, _)| p.clone())
        .collect();
    EvalReport::from_predictions(kept).accuracy
}

struct Writer<'a> {
    out: &'a Path,
    files: Vec<PathBuf>,
}

impl Writer<'_> {
    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.files.push(p.clone());
        p
    }

    fn text(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    fn log(&mut self, name: &str, log: &TrainLog) -> Result<()> {
        self.text(&format!("logs/{name}.tsv"), &log.to_tsv())
    }
}

/// Runs the whole pipeline on generated fixtures and writes every artifact
/// under `out`: raw fixtures, both vocabularies, the base, continued and
/// augmented checkpoints, training logs, the results table, the scatter SVG
/// and its coordinates.
pub fn run_demo(config: &DemoConfig, out: &Path) -> Result<DemoOutcome> {
    let say = |msg: String| {
        if config.verbose {
            eprintln!("{msg}");
        }
    };
    for dir in [out.to_path_buf(), out.join("fixtures"), out.join("logs")] {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut w = Writer {
        out,
        files: Vec::new(),
    };
    let seed = config.seed;
    let rules = PreprocessRules::default();

    let generic = fixtures::generic_corpus(config.generic, seed);
    let unlabeled = fixtures::unlabeled_tweets(config.unlabeled, seed);
    let labeled = fixtures::labeled_tweets(config.train, seed, 0);
    let test = fixtures::labeled_tweets(config.test, seed, 1);
    for (name, records) in [
        ("generic", &generic),
        ("unlabeled", &unlabeled),
        ("train", &labeled),
        ("test", &test),
    ] {
        let p = w.path(&format!("fixtures/{name}.tsv"));
        save_corpus(records, &p)?;
    }
    let generic = normalize_records(&generic, &rules);
    let unlabeled = normalize_records(&unlabeled, &rules);
    let labeled = normalize_records(&labeled, &rules);
    let test = normalize_records(&test, &rules);

    let vocab = fixtures::base_vocab();
    let vocab_path = w.path("vocab.txt");
    save_vocab(&vocab, &vocab_path)?;
    let model_config = ModelConfig {
        max_seq_len: config.max_len,
        ..ModelConfig::desk(vocab.len()).with_hidden(config.hidden)
    };
    let pretrain = |s: u64, epochs: usize| TrainConfig {
        epochs,
        learning_rate: config.pretrain_lr,
        seed: rng::derive(seed, s, 0),
        ..TrainConfig::pretrain()
    };

    let mlm_split = split_validation(&generic, config.valid_size, seed);
    let init = init_model(&model_config, seed)?.with_fingerprint(vocab.fingerprint());
    let (base, log) = pretrain_mlm(
        &init,
        &encode_records(&mlm_split.train, &vocab, config.max_len),
        &encode_records(&mlm_split.validation, &vocab, config.max_len),
        &pretrain(1, config.base_epochs),
    )?;
    say(format!("base: {} steps, validation perplexity {:.3}", log.steps.len(), last_metric(&log)));
    w.log("base", &log)?;
    let p = w.path("base.ckpt");
    save_checkpoint(&base, &p)?;

    let domain = split_validation(&unlabeled, config.valid_size, seed);
    let (continued, log) = pretrain_mlm(
        &base,
        &encode_records(&domain.train, &vocab, config.max_len),
        &encode_records(&domain.validation, &vocab, config.max_len),
        &pretrain(2, config.continued_epochs),
    )?;
    say(format!("continued: {} steps, validation perplexity {:.3}", log.steps.len(), last_metric(&log)));
    w.log("continued", &log)?;
    let p = w.path("continued.ckpt");
    save_checkpoint(&continued, &p)?;

    let augmented = pretrain_with_augmented_vocab(
        &continued,
        &vocab,
        &texts(&domain.train),
        &texts(&domain.validation),
        config.emoticons,
        config.max_len,
        &pretrain(3, config.continued_epochs),
    )?;
    say(format!(
        "augmented: +{} tokens, {} steps, validation perplexity {:.3}",
        augmented.vocab.len() - vocab.len(),
        augmented.log.steps.len(),
        last_metric(&augmented.log)
    ));
    w.log("augmented", &augmented.log)?;
    let p = w.path("vocab_emo.txt");
    save_vocab(&augmented.vocab, &p)?;
    let p = w.path("augmented.ckpt");
    save_checkpoint(&augmented.checkpoint, &p)?;

    let split = split_validation(&labeled, config.valid_size, seed);
    let finetune = TrainConfig {
        epochs: config.finetune_epochs,
        learning_rate: config.finetune_lr,
        seed: rng::derive(seed, 4, 0),
        ..TrainConfig::finetune()
    };
    let runs: [(&'static str, &Checkpoint, &Vocab); 3] = [
        (EXPERIMENTS[0], &base, &vocab),
        (EXPERIMENTS[1], &continued, &vocab),
        (EXPERIMENTS[2], &augmented.checkpoint, &augmented.vocab),
    ];
    let mut reports = Vec::new();
    let mut tuned = Vec::new();
    for (name, ckpt, v) in runs {
        let (model, log) = finetune_records(ckpt, &split.train, &split.validation, v, config.max_len, &finetune)?;
        let report = evaluate_model(&model, &test, v, config.max_len)?;
        say(format!(
            "{name}: selected epoch {}, test accuracy {:.3}",
            log.selected.map_or(0, |s| s.epoch),
            report.accuracy
        ));
        w.log(&format!("finetune_{}", name.to_lowercase().replace('+', "_")), &log)?;
        reports.push((name, report));
        tuned.push((model, v));
    }

    let with_emoticons: Vec<bool> = test.iter().map(|r| has_emoticon(&r.text)).collect();
    let rows = vec![
        ResultsRow {
            dataset: "synthetic".into(),
            scores: reports.iter().map(|(_, r)| r.accuracy).collect(),
        },
        ResultsRow {
            dataset: "synthetic-emoticons".into(),
            scores: reports.iter().map(|(_, r)| accuracy_on(r, &with_emoticons)).collect(),
        },
    ];
    let report = results_table(&EXPERIMENTS, &rows)?;
    w.text("report.tsv", &report)?;

    let best = (0..reports.len()).fold(0, |b, i| if reports[i].1.accuracy > reports[b].1.accuracy { i } else { b });
    let (model, v) = &tuned[best];
    let analysis = analyze_model(model, &test, v, config.max_len, &config.analysis)?;
    if analysis.pca_dims < config.analysis.pca_dims {
        say(format!(
            "analysis: PCA reduced to {} dimensions (requested {})",
            analysis.pca_dims, config.analysis.pca_dims
        ));
    }
    let p = w.path("analysis.svg");
    render_scatter(&analysis.points, &p)?;
    w.text("coords.tsv", &coords_tsv(&analysis.points))?;
    Ok(DemoOutcome {
        report,
        reports,
        analyzed: EXPERIMENTS[best],
        analysis,
        files: w.files,
    })
}

fn last_metric(log: &TrainLog) -> f64 {
    log.evals.last().map_or(f64::NAN, |e| e.metric)
}

