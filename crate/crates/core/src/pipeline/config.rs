//! Flat, strict TOML configuration shared by the command-line tool.
//!
//! ```toml
//! corpus = "data/tweets.tsv"
//! vocab = "data/vocab.txt"
//! hidden = 64
//! heads = 2
//! epochs = 7
//! ```
//!
//! Unknown keys are rejected. Every key left out falls back to a default,
//! and each applied default is reported.

use std::fs;
use std::path::{Path, PathBuf};

use toml::{Table, Value};

use crate::analyze::AnalysisConfig;
use crate::model::{ModelConfig, NUM_CLASSES};
use crate::tokenizer::load_vocab;
use crate::train::{AdamConfig, MaskSplit, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub corpus: PathBuf,
    pub vocab: PathBuf,
    pub test: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub max_len: usize,
    pub valid_size: usize,
    /// Emoticons appended during vocabulary augmentation.
    pub emoticons: usize,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub analysis: AnalysisConfig,
    pub seed: u64,
}

#[derive(Clone, Copy)]
enum Kind {
    Path,
    Count,
    Real,
    Flag,
}

/// `(key, kind, default)`; an empty default means the key is required or
/// optional without a default.
const KEYS: &[(&str, Kind, &str)] = &[
    ("corpus", Kind::Path, ""),
    ("vocab", Kind::Path, ""),
    ("test", Kind::Path, ""),
    ("output_dir", Kind::Path, "."),
    ("max_len", Kind::Count, "150"),
    ("valid_size", Kind::Count, "1000"),
    ("emoticons", Kind::Count, "70"),
    ("hidden", Kind::Count, "64"),
    ("embedding", Kind::Count, ""),
    ("heads", Kind::Count, "2"),
    ("layers", Kind::Count, "2"),
    ("ff", Kind::Count, ""),
    ("dropout", Kind::Real, "0.2"),
    ("share_layers", Kind::Flag, "false"),
    ("batch_size", Kind::Count, "16"),
    ("epochs", Kind::Count, "7"),
    ("max_steps", Kind::Count, ""),
    ("learning_rate", Kind::Real, "0.0001"),
    ("finetune_epochs", Kind::Count, "5"),
    ("finetune_learning_rate", Kind::Real, "0.00005"),
    ("adam_beta1", Kind::Real, "0.9"),
    ("adam_beta2", Kind::Real, "0.999"),
    ("adam_epsilon", Kind::Real, "1e-8"),
    ("mask_rate", Kind::Real, "0.15"),
    ("mask_split_mask", Kind::Real, "0.8"),
    ("mask_split_random", Kind::Real, "0.1"),
    ("mask_split_keep", Kind::Real, "0.1"),
    ("electra_weight", Kind::Real, "50"),
    ("target_perplexity", Kind::Real, ""),
    ("pca_dims", Kind::Count, "50"),
    ("tsne_perplexity", Kind::Real, "30"),
    ("tsne_iterations", Kind::Count, "1000"),
    ("tsne_learning_rate", Kind::Real, "200"),
    ("seed", Kind::Count, "0"),
];

struct Reader<'a> {
    table: &'a Table,
    base: &'a Path,
    defaults: Vec<String>,
}

fn key_error(key: &str, what: &str) -> Error {
    Error::Config(format!("key '{key}' {what}"))
}

impl Reader<'_> {
    fn lookup(key: &str) -> (Kind, &'static str) {
        let &(_, kind, default) = KEYS.iter().find(|(k, _, _)| *k == key).expect("known key");
        (kind, default)
    }

    /// The TOML value, or the parsed default (recorded as applied).
    fn value(&mut self, key: &str) -> Option<Value> {
        if let Some(v) = self.table.get(key) {
            return Some(v.clone());
        }
        let (kind, default) = Self::lookup(key);
        if default.is_empty() {
            return None;
        }
        self.defaults.push(format!("{key} = {default}"));
        Some(match kind {
            Kind::Path => Value::String(default.into()),
            Kind::Count => Value::Integer(default.parse().unwrap()),
            Kind::Real => Value::Float(default.parse().unwrap()),
            Kind::Flag => Value::Boolean(default.parse().unwrap()),
        })
    }

    fn path(&mut self, key: &str) -> Result<Option<PathBuf>> {
        match self.value(key) {
            None => Ok(None),
            Some(Value::String(s)) => {
                let p = PathBuf::from(s);
                Ok(Some(if p.is_relative() { self.base.join(p) } else { p }))
            }
            Some(_) => Err(key_error(key, "must be a string path")),
        }
    }

    fn count(&mut self, key: &str) -> Result<Option<usize>> {
        match self.value(key) {
            None => Ok(None),
            Some(Value::Integer(i)) if i >= 0 => Ok(Some(i as usize)),
            Some(_) => Err(key_error(key, "must be a non-negative integer")),
        }
    }

    fn real(&mut self, key: &str) -> Result<Option<f64>> {
        match self.value(key) {
            None => Ok(None),
            Some(Value::Float(f)) => Ok(Some(f)),
            Some(Value::Integer(i)) => Ok(Some(i as f64)),
            Some(_) => Err(key_error(key, "must be a number")),
        }
    }

    fn flag(&mut self, key: &str) -> Result<bool> {
        match self.value(key) {
            Some(Value::Boolean(b)) => Ok(b),
            _ => Err(key_error(key, "must be true or false")),
        }
    }
}

fn positive_real(key: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(key_error(key, &format!("must be positive (got {v})")))
    }
}

impl PipelineConfig {
    /// Parses configuration text. Relative paths resolve against `base`.
    /// Returns the config and the `key = value` defaults that were applied.
    /// Referenced files are not checked here.
    pub fn parse(text: &str, base: &Path) -> Result<(Self, Vec<String>)> {
        Self::parse_with(text, base, &[])
    }

    /// Like [`PipelineConfig::parse`], with path keys supplied by the caller
    /// taking precedence over the file.
    pub fn parse_with(text: &str, base: &Path, paths: &[(&str, &Path)]) -> Result<(Self, Vec<String>)> {
        let mut table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("malformed TOML: {}", e.message())))?;
        for (key, path) in paths {
            table.insert(key.to_string(), Value::String(path.to_string_lossy().into_owned()));
        }
        if let Some(unknown) = table.keys().find(|k| !KEYS.iter().any(|(name, _, _)| name == k)) {
            return Err(Error::Config(format!("unknown key '{unknown}'")));
        }
        let mut r = Reader {
            table: &table,
            base,
            defaults: Vec::new(),
        };
        let corpus = r.path("corpus")?;
        let vocab = r.path("vocab")?;
        let missing: Vec<&str> = [("corpus", &corpus), ("vocab", &vocab)]
            .iter()
            .filter(|(_, p)| p.is_none())
            .map(|(k, _)| *k)
            .collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!("required paths missing: {}", missing.join(", "))));
        }
        let test = r.path("test")?;
        let output_dir = r.path("output_dir")?.unwrap();

        let max_len = r.count("max_len")?.unwrap();
        if max_len < 2 {
            return Err(key_error("max_len", "must be at least 2"));
        }
        let hidden = r.count("hidden")?.unwrap();
        let heads = r.count("heads")?.unwrap();
        if hidden == 0 || heads == 0 || hidden % heads != 0 {
            return Err(Error::Config(format!(
                "key 'hidden' ({hidden}) must be a positive multiple of key 'heads' ({heads})"
            )));
        }
        let layers = r.count("layers")?.unwrap();
        if layers == 0 {
            return Err(key_error("layers", "must be at least 1"));
        }
        let share_layers = r.flag("share_layers")?;
        let embedding = r.count("embedding")?.unwrap_or(hidden);
        if embedding != hidden && !share_layers {
            return Err(Error::Config(format!(
                "key 'embedding' ({embedding}) may differ from key 'hidden' ({hidden}) only with key 'share_layers' = true"
            )));
        }
        if embedding == 0 {
            return Err(key_error("embedding", "must be positive"));
        }
        let ff = r.count("ff")?.unwrap_or(4 * hidden);
        if ff == 0 {
            return Err(key_error("ff", "must be positive"));
        }
        let dropout = r.real("dropout")?.unwrap();
        if !(0.0..1.0).contains(&dropout) {
            return Err(key_error("dropout", &format!("must lie in [0, 1) (got {dropout})")));
        }
        let model = ModelConfig {
            vocab_size: 0,
            max_seq_len: max_len,
            hidden_size: hidden,
            embedding_size: embedding,
            num_layers: layers,
            num_heads: heads,
            ff_size: ff,
            dropout,
            share_layers,
            num_classes: NUM_CLASSES,
        };

        let batch_size = r.count("batch_size")?.unwrap();
        if batch_size == 0 {
            return Err(key_error("batch_size", "must be at least 1"));
        }
        let epochs = r.count("epochs")?.unwrap();
        let max_steps = r.count("max_steps")?;
        let learning_rate = positive_real("learning_rate", r.real("learning_rate")?.unwrap())?;
        let finetune_epochs = r.count("finetune_epochs")?.unwrap();
        let finetune_lr = positive_real("finetune_learning_rate", r.real("finetune_learning_rate")?.unwrap())?;
        let adam = AdamConfig {
            beta1: r.real("adam_beta1")?.unwrap(),
            beta2: r.real("adam_beta2")?.unwrap(),
            epsilon: positive_real("adam_epsilon", r.real("adam_epsilon")?.unwrap())?,
        };
        for (key, b) in [("adam_beta1", adam.beta1), ("adam_beta2", adam.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(key_error(key, &format!("must lie in [0, 1) (got {b})")));
            }
        }
        let mask_rate = r.real("mask_rate")?.unwrap();
        if !(mask_rate > 0.0 && mask_rate < 1.0) {
            return Err(key_error("mask_rate", &format!("must lie in (0, 1) (got {mask_rate})")));
        }
        let mask_split = MaskSplit {
            mask: r.real("mask_split_mask")?.unwrap(),
            random: r.real("mask_split_random")?.unwrap(),
            keep: r.real("mask_split_keep")?.unwrap(),
        };
        let s = mask_split;
        if [s.mask, s.random, s.keep].iter().any(|&p| p < 0.0) || (s.mask + s.random + s.keep - 1.0).abs() > 1e-9 {
            return Err(Error::Config(
                "keys 'mask_split_mask', 'mask_split_random' and 'mask_split_keep' must be non-negative and sum to 1"
                    .into(),
            ));
        }
        let electra_weight = positive_real("electra_weight", r.real("electra_weight")?.unwrap())?;
        let target_perplexity = match r.real("target_perplexity")? {
            Some(p) => Some(positive_real("target_perplexity", p)?),
            None => None,
        };
        let seed = r.count("seed")?.unwrap() as u64;
        let pretrain = TrainConfig {
            batch_size,
            epochs,
            max_steps,
            learning_rate,
            adam,
            mask_rate,
            mask_split,
            electra_weight,
            seed,
            target_perplexity,
        };
        let finetune = TrainConfig {
            epochs: finetune_epochs,
            learning_rate: finetune_lr,
            target_perplexity: None,
            ..pretrain.clone()
        };

        let analysis = AnalysisConfig {
            pca_dims: r.count("pca_dims")?.unwrap(),
            perplexity: positive_real("tsne_perplexity", r.real("tsne_perplexity")?.unwrap())?,
            iterations: r.count("tsne_iterations")?.unwrap(),
            learning_rate: positive_real("tsne_learning_rate", r.real("tsne_learning_rate")?.unwrap())?,
            seed,
            ..AnalysisConfig::default()
        };
        let config = PipelineConfig {
            corpus: corpus.unwrap(),
            vocab: vocab.unwrap(),
            test,
            output_dir,
            max_len,
            valid_size: r.count("valid_size")?.unwrap(),
            emoticons: r.count("emoticons")?.unwrap(),
            model,
            pretrain,
            finetune,
            analysis,
            seed,
        };
        Ok((config, r.defaults))
    }

    /// Checks that referenced input files exist and sizes the model to the
    /// vocabulary.
    pub fn resolve(mut self) -> Result<Self> {
        for (key, path) in [("corpus", Some(&self.corpus)), ("vocab", Some(&self.vocab)), ("test", self.test.as_ref())] {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(Error::Config(format!("key '{key}': file {} does not exist", p.display())));
                }
            }
        }
        self.model.vocab_size = load_vocab(&self.vocab)?.len();
        self.model.validate()?;
        Ok(self)
    }
}

/// Reads, parses and resolves a configuration file, echoing every applied
/// default to standard error.
pub fn validate_config(path: impl AsRef<Path>) -> Result<PipelineConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let (config, defaults) = PipelineConfig::parse(&text, base)?;
    for d in &defaults {
        eprintln!("default: {d}");
    }
    config.resolve()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<(PipelineConfig, Vec<String>)> {
        PipelineConfig::parse(text, Path::new("/data"))
    }

    #[test]
    fn minimal_file_gets_reference_defaults() {
        let (c, defaults) = parse("corpus = \"c.tsv\"\nvocab = \"v.txt\"\n").unwrap();
        assert_eq!(c.pretrain.batch_size, 16);
        assert_eq!(c.model.dropout, 0.2);
        assert_eq!(c.max_len, 150);
        assert_eq!(c.corpus, PathBuf::from("/data/c.tsv"));
        assert!(defaults.contains(&"batch_size = 16".to_string()));
        assert!(defaults.contains(&"dropout = 0.2".to_string()));
        assert!(defaults.contains(&"max_len = 150".to_string()));
        assert!(!defaults.iter().any(|d| d.starts_with("corpus")));
    }

    #[test]
    fn caller_paths_override_file() {
        let (c, _) = PipelineConfig::parse_with("vocab = \"v.txt\"\n", Path::new("/data"), &[("corpus", Path::new("/x/c.tsv"))]).unwrap();
        assert_eq!(c.corpus, PathBuf::from("/x/c.tsv"));
        assert_eq!(c.vocab, PathBuf::from("/data/v.txt"));
    }

    #[test]
    fn indivisible_heads_name_both_keys() {
        let err = parse("corpus = \"c\"\nvocab = \"v\"\nhidden = 64\nheads = 3\n").unwrap_err().to_string();
        assert!(err.contains("'hidden'") && err.contains("'heads'"), "{err}");
    }

    #[test]
    fn empty_file_misses_paths() {
        let err = parse("").unwrap_err().to_string();
        assert!(err.contains("required paths missing: corpus, vocab"), "{err}");
    }

    #[test]
    fn unknown_and_mistyped_keys_fail() {
        let err = parse("corpus = \"c\"\nvocab = \"v\"\nbatchsize = 8\n").unwrap_err().to_string();
        assert!(err.contains("unknown key 'batchsize'"), "{err}");
        let err = parse("corpus = \"c\"\nvocab = \"v\"\nepochs = \"seven\"\n").unwrap_err().to_string();
        assert!(err.contains("'epochs'"), "{err}");
        let err = parse("corpus = \"c\"\nvocab = \"v\"\nmask_rate = 1.5\n").unwrap_err().to_string();
        assert!(err.contains("'mask_rate'"), "{err}");
    }

    #[test]
    fn factorized_embeddings_need_sharing() {
        assert!(parse("corpus = \"c\"\nvocab = \"v\"\nembedding = 16\n").is_err());
        let (c, _) = parse("corpus = \"c\"\nvocab = \"v\"\nembedding = 16\nshare_layers = true\n").unwrap();
        assert!(c.model.is_factorized());
    }

    #[test]
    fn resolve_checks_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("c.tsv"), "").unwrap();
        let (c, _) = PipelineConfig::parse("corpus = \"c.tsv\"\nvocab = \"missing.txt\"\n", dir.path()).unwrap();
        let err = c.resolve().unwrap_err().to_string();
        assert!(err.contains("'vocab'"), "{err}");
    }
}
