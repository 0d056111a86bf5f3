use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tvlab::corpus::save_corpus;
use tvlab::pipeline::fixtures;
use tvlab::tokenizer::save_vocab;

fn tvlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tvlab"))
        .args(args)
        .current_dir(dir)
        .env_remove("TVLAB_SEED")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SMALL: &str = "hidden = 16\nheads = 2\nlayers = 1\nmax_len = 24\nepochs = 1\nlearning_rate = 0.001\n\
finetune_epochs = 2\nfinetune_learning_rate = 0.001\nvalid_size = 20\nbatch_size = 8\n";

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    save_corpus(&fixtures::unlabeled_tweets(120, 5), p.join("raw.tsv")).unwrap();
    save_corpus(&fixtures::labeled_tweets(100, 5, 0), p.join("train.tsv")).unwrap();
    save_corpus(&fixtures::labeled_tweets(40, 5, 1), p.join("test.tsv")).unwrap();
    save_vocab(&fixtures::base_vocab(), p.join("vocab.txt")).unwrap();
    fs::write(p.join("small.toml"), SMALL).unwrap();
    dir
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = tvlab(dir.path(), &["--help"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("pretrain"));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = tvlab(dir.path(), &["eval", "--test", "t.tsv"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("--model"));

    let out = tvlab(dir.path(), &["demo", "--out", "d", "--bogus"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("Usage"));

    assert_eq!(code(&tvlab(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&tvlab(dir.path(), &["pretrain", "mlm", "--corpus", "c.tsv", "--out", "m.ckpt"])), 1);
}

#[test]
fn data_errors_exit_two() {
    let dir = workspace();
    let p = dir.path();
    let out = tvlab(p, &["eval", "--model", "missing.ckpt", "--test", "test.tsv"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("missing.ckpt"));

    fs::write(p.join("broken.tsv"), "only one field\n").unwrap();
    assert_eq!(code(&tvlab(p, &["preprocess", "--in", "broken.tsv", "--out", "o.tsv"])), 2);

    fs::write(p.join("empty.toml"), "").unwrap();
    let out = tvlab(p, &["validate-config", "empty.toml"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("required paths missing"));

    fs::write(p.join("typo.toml"), "corpus = \"raw.tsv\"\nvocab = \"vocab.txt\"\nbatchsize = 3\n").unwrap();
    let out = tvlab(p, &["validate-config", "typo.toml"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("'batchsize'"));
}

#[test]
fn validate_config_echoes_defaults() {
    let dir = workspace();
    let p = dir.path();
    fs::write(p.join("min.toml"), "corpus = \"raw.tsv\"\nvocab = \"vocab.txt\"\n").unwrap();
    let out = tvlab(p, &["validate-config", "min.toml"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let err = stderr(&out);
    for d in ["default: batch_size = 16", "default: dropout = 0.2", "default: max_len = 150"] {
        assert!(err.contains(d), "{err}");
    }
}

#[test]
fn preprocess_keeps_ids_and_labels() {
    let dir = workspace();
    let p = dir.path();
    let out = tvlab(p, &["preprocess", "--in", "train.tsv", "--out", "norm.tsv"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let before = tvlab::corpus::load_corpus(p.join("train.tsv"), true).unwrap();
    let after = tvlab::corpus::load_corpus(p.join("norm.tsv"), true).unwrap();
    assert_eq!(before.len(), after.len());
    for (b, a) in before.iter().zip(&after) {
        assert_eq!((&b.id, b.label), (&a.id, a.label));
        assert!(!a.text.contains("https://") && !a.text.contains('@'), "{}", a.text);
    }
}

/// preprocess → audit → pretrain → augment → finetune → eval → analyze.
fn pipeline(p: &Path, threads: &str) -> Vec<Vec<u8>> {
    let steps: &[&[&str]] = &[
        &["preprocess", "--in", "raw.tsv", "--out", "norm.tsv"],
        &["vocab", "audit", "--corpus", "norm.tsv", "--vocab", "vocab.txt", "--out", "audit.tsv"],
        &["pretrain", "mlm", "--corpus", "norm.tsv", "--config", "small.toml", "--vocab", "vocab.txt", "--out", "m.ckpt", "--seed", "4"],
        &["vocab", "augment", "--vocab", "vocab.txt", "--audit", "audit.tsv", "-k", "70", "--out", "v2.txt", "--model", "m.ckpt", "--model-out", "m2.ckpt"],
        &["pretrain", "electra", "--corpus", "norm.tsv", "--config", "small.toml", "--init", "m2.ckpt", "--out", "e.ckpt", "--seed", "4"],
        &["finetune", "--train", "train.tsv", "--valid-size", "20", "--seed", "4", "--init", "e.ckpt", "--out", "f.ckpt", "--config", "small.toml"],
        &["eval", "--model", "f.ckpt", "--test", "test.tsv", "--report", "r.tsv", "--predictions", "p.tsv"],
        &["analyze", "--model", "f.ckpt", "--test", "test.tsv", "--iterations", "200", "--seed", "4", "--svg", "a.svg", "--coords", "c.tsv"],
    ];
    for step in steps {
        let mut args = vec!["--threads", threads];
        args.extend_from_slice(step);
        let out = tvlab(p, &args);
        assert_eq!(code(&out), 0, "{step:?}: {}", stderr(&out));
    }
    ["m.ckpt", "v2.txt", "m2.ckpt", "e.ckpt", "e.ckpt.generator", "f.ckpt", "f.ckpt.vocab", "r.tsv", "p.tsv", "a.svg", "c.tsv"]
        .iter()
        .map(|f| fs::read(p.join(f)).unwrap_or_else(|e| panic!("{f}: {e}")))
        .collect()
}

#[test]
fn pipeline_is_reproducible_across_thread_counts() {
    let a = workspace();
    let b = workspace();
    let one = pipeline(a.path(), "1");
    let two = pipeline(b.path(), "2");
    assert!(one == two, "artifacts differ between thread counts");
    let vocab = tvlab::tokenizer::load_vocab(a.path().join("f.ckpt.vocab")).unwrap();
    assert!(vocab.id("😊").is_some());
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = workspace();
    let p = dir.path();
    let run = |name: &str, seed: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_tvlab"))
            .args(["pretrain", "mlm", "--corpus", "raw.tsv", "--config", "small.toml", "--vocab", "vocab.txt", "--out", name])
            .env("TVLAB_SEED", seed)
            .current_dir(p)
            .output()
            .unwrap();
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        fs::read(p.join(name)).unwrap()
    };
    let flag = tvlab(p, &["pretrain", "mlm", "--corpus", "raw.tsv", "--config", "small.toml", "--vocab", "vocab.txt", "--out", "flag.ckpt", "--seed", "9"]);
    assert_eq!(code(&flag), 0);
    assert_eq!(run("env9.ckpt", "9"), fs::read(p.join("flag.ckpt")).unwrap());
    assert_ne!(run("env8.ckpt", "8"), fs::read(p.join("flag.ckpt")).unwrap());
}

#[test]
fn demo_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = tvlab(dir.path(), &["demo", "--seed", "0", "--out", "run", "--quiet"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let run = dir.path().join("run");
    for f in ["vocab.txt", "vocab_emo.txt", "base.ckpt", "continued.ckpt", "augmented.ckpt", "report.tsv", "analysis.svg", "coords.tsv"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let report = fs::read_to_string(run.join("report.tsv")).unwrap();
    assert!(report.starts_with("dataset\tBase\tPre\tPre+Emo\n"), "{report}");
    assert_eq!(String::from_utf8_lossy(&out.stdout), report);
}
