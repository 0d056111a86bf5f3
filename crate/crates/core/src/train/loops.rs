use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::losses::mlm_sum;
use super::{classification_loss, electra_loss, mask_tokens, perplexity, Adam, EvalRecord, StepRecord, TrainConfig, TrainLog};
use crate::corpus::TweetRecord;
use crate::evaluate::predict_ids;
use crate::model::{extend_embeddings, Checkpoint, Gradients, Model, ModelConfig};
use crate::rng;
use crate::tokenizer::{audit_unknowns, augment_vocab, encode, TokenId, Vocab};
use crate::{Error, Result};

/// Seed for the generator samples used when scoring a discriminator.
const EVAL_SAMPLE_SEED: u64 = 0xE1EC_7AA5;

/// An encoded tweet (real positions only) with its class index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSeq {
    pub ids: Vec<TokenId>,
    pub label: usize,
}

/// Runs `f` over the batch concurrently and reduces the results in batch
/// order, so the sum does not depend on the thread count.
fn reduce_batch<F>(model: &Model<f32>, batch: &[usize], f: F) -> Result<(f64, Gradients<f32>)>
where
    F: Fn(usize) -> Result<(f64, Gradients<f32>)> + Sync,
{
    let parts: Vec<Result<(f64, Gradients<f32>)>> = batch.par_iter().map(|&i| f(i)).collect();
    let mut loss = 0.0;
    let mut grads = Gradients::zeros_like(model);
    for part in parts {
        let (l, g) = part?;
        loss += l;
        grads.add_assign(&g);
    }
    Ok((loss, grads))
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(rng::derive(seed, rng::stream::SHUFFLE, epoch as u64)));
    order
}

fn out_of_steps(config: &TrainConfig, steps: usize) -> bool {
    config.max_steps.is_some_and(|m| steps >= m)
}

/// Masked-LM training from `init` over shuffled batches. After each epoch the
/// validation perplexity is logged; training stops at the first evaluation at
/// or below `target_perplexity`, which is then recorded as selected.
pub fn pretrain_mlm(
    init: &Checkpoint,
    train: &[Vec<TokenId>],
    valid: &[Vec<TokenId>],
    config: &TrainConfig,
) -> Result<(Checkpoint, TrainLog)> {
    config.validate()?;
    let mut ckpt = init.clone();
    let mut log = TrainLog::default();
    if config.epochs == 0 || train.is_empty() {
        return Ok((ckpt, log));
    }
    let vocab_size = ckpt.config().vocab_size;
    let mut adam = Adam::new(&ckpt.model, config.adam, config.learning_rate);
    let mut steps = 0;
    let mut seen = 0u64;
    'epochs: for epoch in 0..config.epochs {
        let order = epoch_order(train.len(), config.seed, epoch);
        for batch in order.chunks(config.batch_size) {
            let masked: Vec<_> = batch
                .iter()
                .enumerate()
                .map(|(j, &i)| {
                    let seed = rng::derive(config.seed, rng::stream::MASK, seen + j as u64);
                    mask_tokens(&train[i], vocab_size, config, seed)
                })
                .collect();
            seen += batch.len() as u64;
            let count: usize = masked.iter().map(|m| m.targets.len()).sum();
            if count == 0 {
                continue;
            }
            let scale = 1.0 / count as f32;
            let slots: Vec<usize> = (0..batch.len()).collect();
            let model = &ckpt.model;
            let (sum, grads) = reduce_batch(model, &slots, |j| {
                let m = &masked[j];
                if m.targets.is_empty() {
                    return Ok((0.0, Gradients::zeros_like(model)));
                }
                let (s, g) = mlm_sum(model, &m.corrupted, &m.targets, Some(scale))?;
                Ok((s as f64, g.expect("gradients requested")))
            })?;
            adam.step(&mut ckpt.model, &grads);
            steps += 1;
            log.steps.push(StepRecord {
                step: steps,
                loss: sum / count as f64,
            });
            if out_of_steps(config, steps) {
                if !valid.is_empty() {
                    record_perplexity(&ckpt, valid, config, epoch + 1, steps, &mut log)?;
                }
                break 'epochs;
            }
        }
        if !valid.is_empty() && record_perplexity(&ckpt, valid, config, epoch + 1, steps, &mut log)? {
            break;
        }
    }
    Ok((ckpt, log))
}

/// Logs validation perplexity; returns whether the target was reached.
fn record_perplexity(
    ckpt: &Checkpoint,
    valid: &[Vec<TokenId>],
    config: &TrainConfig,
    epoch: usize,
    step: usize,
    log: &mut TrainLog,
) -> Result<bool> {
    let metric = perplexity(&ckpt.model, valid, config)?;
    let record = EvalRecord { epoch, step, metric };
    log.evals.push(record);
    let reached = config.target_perplexity.is_some_and(|t| metric <= t);
    if reached && log.selected.is_none() {
        log.selected = Some(record);
    }
    Ok(reached)
}

#[derive(Debug, Clone)]
pub struct AugmentedPretraining {
    pub vocab: Vocab,
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// Audits `[UNK]` emoticons in the (preprocessed) corpus, appends the `k`
/// most frequent to the vocabulary, grows the embeddings to match and runs
/// one more cycle of masked-LM training.
pub fn pretrain_with_augmented_vocab<S: AsRef<str>>(
    ckpt: &Checkpoint,
    old_vocab: &Vocab,
    train: &[S],
    valid: &[S],
    k: usize,
    max_len: usize,
    config: &TrainConfig,
) -> Result<AugmentedPretraining> {
    if ckpt.vocab_fingerprint != old_vocab.fingerprint() {
        return Err(Error::Invalid(format!(
            "checkpoint vocabulary fingerprint {:016x} does not match the vocabulary ({:016x})",
            ckpt.vocab_fingerprint,
            old_vocab.fingerprint()
        )));
    }
    let audit = audit_unknowns(train, old_vocab);
    let vocab = augment_vocab(old_vocab, &audit, k);
    let extended = extend_embeddings(ckpt, vocab.len(), rng::derive(config.seed, rng::stream::EXTEND, 0))?
        .with_fingerprint(vocab.fingerprint());
    let enc = |texts: &[S]| -> Vec<Vec<TokenId>> {
        texts.iter().map(|t| encode(t.as_ref(), &vocab, max_len).real_ids()).collect()
    };
    let (checkpoint, log) = pretrain_mlm(&extended, &enc(train), &enc(valid), config)?;
    Ok(AugmentedPretraining { vocab, checkpoint, log })
}

/// A generator half the discriminator's width (at least one unit per head),
/// with unfactorized embeddings and no layer sharing.
pub fn generator_config(discriminator: &ModelConfig) -> ModelConfig {
    let hidden = (discriminator.hidden_size / 2).max(1);
    let heads = (1..=discriminator.num_heads.min(hidden))
        .rev()
        .find(|h| hidden.is_multiple_of(*h))
        .unwrap_or(1);
    ModelConfig {
        num_heads: heads,
        share_layers: false,
        ..discriminator.clone().with_hidden(hidden)
    }
}

/// Accuracy of the discriminator on corrupted sequences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionAccuracy {
    /// Over every real position.
    pub overall: f64,
    /// Over the positions whose token differs from the original.
    pub replaced: f64,
    pub replaced_count: usize,
    pub positions: usize,
}

/// Scores the discriminator on corrupted sequences against their originals;
/// a position counts as predicted replaced when its logit is positive.
pub fn detection_accuracy(
    discriminator: &Model<f32>,
    corrupted: &[Vec<TokenId>],
    originals: &[Vec<TokenId>],
) -> Result<DetectionAccuracy> {
    if corrupted.len() != originals.len() {
        return Err(Error::Invalid("one original per corrupted sequence required".into()));
    }
    let (mut correct, mut positions, mut hit, mut replaced) = (0usize, 0usize, 0usize, 0usize);
    for (input, original) in corrupted.iter().zip(originals) {
        if input.len() != original.len() {
            return Err(Error::Invalid("corrupted and original lengths differ".into()));
        }
        let hidden = discriminator.encode_sequence(input, &vec![1; input.len()])?;
        let logits = discriminator.discriminator_logits(&hidden);
        for ((&logit, a), b) in logits.iter().zip(input).zip(original) {
            let (predicted, was_replaced) = (logit > 0.0, a != b);
            positions += 1;
            correct += (predicted == was_replaced) as usize;
            if was_replaced {
                replaced += 1;
                hit += predicted as usize;
            }
        }
    }
    if positions == 0 {
        return Err(Error::Invalid("empty corpus".into()));
    }
    Ok(DetectionAccuracy {
        overall: correct as f64 / positions as f64,
        replaced: if replaced == 0 { 1.0 } else { hit as f64 / replaced as f64 },
        replaced_count: replaced,
        positions,
    })
}

/// [`detection_accuracy`] on `corpus` corrupted by the generator with a
/// fixed evaluation seed.
pub fn replaced_token_accuracy(
    generator: &Model<f32>,
    discriminator: &Model<f32>,
    corpus: &[Vec<TokenId>],
    config: &TrainConfig,
) -> Result<DetectionAccuracy> {
    let corrupted = corpus
        .iter()
        .enumerate()
        .map(|(i, ids)| {
            let seed = rng::derive(EVAL_SAMPLE_SEED, rng::stream::EVAL_MASK, i as u64);
            Ok(electra_loss(generator, discriminator, ids, config, seed)?.discriminator_input)
        })
        .collect::<Result<Vec<_>>>()?;
    detection_accuracy(discriminator, &corrupted, corpus)
}

#[derive(Debug, Clone)]
pub struct ElectraOutcome {
    pub discriminator: Checkpoint,
    pub generator: Checkpoint,
    pub log: TrainLog,
}

/// Joint generator/discriminator training over pair examples. Each step
/// averages the per-sequence objectives of the batch and updates both
/// networks; the per-epoch metric is the discriminator's overall detection
/// accuracy on `valid`.
pub fn pretrain_electra(
    generator: &Checkpoint,
    discriminator: &Checkpoint,
    train: &[Vec<TokenId>],
    valid: &[Vec<TokenId>],
    config: &TrainConfig,
) -> Result<ElectraOutcome> {
    config.validate()?;
    if generator.config().vocab_size != discriminator.config().vocab_size {
        return Err(Error::Invalid(format!(
            "generator vocabulary ({}) differs from discriminator vocabulary ({})",
            generator.config().vocab_size,
            discriminator.config().vocab_size
        )));
    }
    let mut gen = generator.clone();
    let mut disc = discriminator.clone();
    let mut log = TrainLog::default();
    let mut gen_adam = Adam::new(&gen.model, config.adam, config.learning_rate);
    let mut disc_adam = Adam::new(&disc.model, config.adam, config.learning_rate);
    let mut steps = 0;
    let mut seen = 0u64;
    'epochs: for epoch in 0..config.epochs {
        if train.is_empty() {
            break;
        }
        let order = epoch_order(train.len(), config.seed, epoch);
        for batch in order.chunks(config.batch_size) {
            let inv = 1.0 / batch.len() as f32;
            let (g_model, d_model) = (&gen.model, &disc.model);
            let parts: Vec<Result<_>> = batch
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let seed = rng::derive(config.seed, rng::stream::SAMPLE, seen + j as u64);
                    electra_loss(g_model, d_model, &train[i], config, seed)
                })
                .collect();
            seen += batch.len() as u64;
            let mut g_grads = Gradients::zeros_like(g_model);
            let mut d_grads = Gradients::zeros_like(d_model);
            let mut total = 0.0;
            for part in parts {
                let part = part?;
                total += part.total as f64;
                g_grads.add_assign(&part.generator_grads);
                d_grads.add_assign(&part.discriminator_grads);
            }
            g_grads.scale(inv);
            d_grads.scale(inv);
            gen_adam.step(&mut gen.model, &g_grads);
            disc_adam.step(&mut disc.model, &d_grads);
            steps += 1;
            log.steps.push(StepRecord {
                step: steps,
                loss: total / batch.len() as f64,
            });
            if out_of_steps(config, steps) {
                if !valid.is_empty() {
                    let acc = replaced_token_accuracy(&gen.model, &disc.model, valid, config)?;
                    log.evals.push(EvalRecord {
                        epoch: epoch + 1,
                        step: steps,
                        metric: acc.overall,
                    });
                }
                break 'epochs;
            }
        }
        if !valid.is_empty() {
            let acc = replaced_token_accuracy(&gen.model, &disc.model, valid, config)?;
            log.evals.push(EvalRecord {
                epoch: epoch + 1,
                step: steps,
                metric: acc.overall,
            });
        }
    }
    Ok(ElectraOutcome {
        discriminator: disc,
        generator: gen,
        log,
    })
}

/// 1-based epoch with the highest metric, earliest on ties.
pub fn select_best_epoch(metrics: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &m) in metrics.iter().enumerate() {
        if best.is_none_or(|(_, b)| m > b) {
            best = Some((i, m));
        }
    }
    best.map(|(i, _)| i + 1)
}

/// `[CLS]` fine-tuning with per-epoch model selection: after every epoch
/// `validator` scores the current parameters and the best-scoring snapshot
/// (earliest on ties) is returned.
pub fn finetune_with_validator<V>(
    init: &Checkpoint,
    train: &[LabeledSeq],
    config: &TrainConfig,
    mut validator: V,
) -> Result<(Checkpoint, TrainLog)>
where
    V: FnMut(&Checkpoint) -> Result<f64>,
{
    config.validate()?;
    let classes = init.config().num_classes;
    if let Some(bad) = train.iter().find(|s| s.label >= classes) {
        return Err(Error::Invalid(format!("label index {} out of range", bad.label)));
    }
    let mut ckpt = init.clone();
    let mut best = ckpt.clone();
    let mut log = TrainLog::default();
    let mut adam = Adam::new(&ckpt.model, config.adam, config.learning_rate);
    let mut steps = 0;
    let mut seen = 0u64;
    for epoch in 0..config.epochs {
        let order = epoch_order(train.len(), config.seed, epoch);
        let mut stop = false;
        for batch in order.chunks(config.batch_size) {
            let model = &ckpt.model;
            let base = seen;
            let slots: Vec<usize> = (0..batch.len()).collect();
            let (sum, mut grads) = reduce_batch(model, &slots, |j| {
                let s = &train[batch[j]];
                let seed = rng::derive(config.seed, rng::stream::DROPOUT, base + j as u64);
                let (l, g) = classification_loss(model, &s.ids, s.label, Some(seed))?;
                Ok((l as f64, g))
            })?;
            seen += batch.len() as u64;
            grads.scale(1.0 / batch.len() as f32);
            adam.step(&mut ckpt.model, &grads);
            steps += 1;
            log.steps.push(StepRecord {
                step: steps,
                loss: sum / batch.len() as f64,
            });
            if out_of_steps(config, steps) {
                stop = true;
                break;
            }
        }
        let metric = validator(&ckpt)?;
        let record = EvalRecord {
            epoch: epoch + 1,
            step: steps,
            metric,
        };
        log.evals.push(record);
        if log.selected.is_none_or(|s| metric > s.metric) {
            log.selected = Some(record);
            best = ckpt.clone();
        }
        if stop {
            break;
        }
    }
    Ok((best, log))
}

/// Fraction of sequences whose argmax prediction equals the label.
pub fn accuracy(model: &Model<f32>, seqs: &[LabeledSeq]) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::Invalid("empty validation split".into()));
    }
    let correct: Result<Vec<bool>> = seqs
        .par_iter()
        .map(|s| Ok(predict_ids(model, &s.ids)?.0 == s.label))
        .collect();
    Ok(correct?.iter().filter(|&&c| c).count() as f64 / seqs.len() as f64)
}

/// Fine-tunes on `train`, selecting the epoch with the highest validation
/// accuracy.
pub fn finetune(
    init: &Checkpoint,
    train: &[LabeledSeq],
    valid: &[LabeledSeq],
    config: &TrainConfig,
) -> Result<(Checkpoint, TrainLog)> {
    if valid.is_empty() {
        return Err(Error::Invalid("empty validation split".into()));
    }
    finetune_with_validator(init, train, config, |c| accuracy(&c.model, valid))
}

fn labeled(records: &[TweetRecord], vocab: &Vocab, max_len: usize) -> Result<Vec<LabeledSeq>> {
    records
        .iter()
        .map(|r| {
            Ok(LabeledSeq {
                label: r.require_label()?.index(),
                ids: encode(&r.text, vocab, max_len).real_ids(),
            })
        })
        .collect()
}

/// [`finetune`] on preprocessed records; every record must carry a label.
pub fn finetune_records(
    init: &Checkpoint,
    train: &[TweetRecord],
    valid: &[TweetRecord],
    vocab: &Vocab,
    max_len: usize,
    config: &TrainConfig,
) -> Result<(Checkpoint, TrainLog)> {
    let train = labeled(train, vocab, max_len)?;
    let valid = labeled(valid, vocab, max_len)?;
    finetune(init, &train, &valid, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use crate::tokenizer::{CLS, SEP};

    fn tiny(vocab: usize) -> Checkpoint {
        let config = ModelConfig {
            num_layers: 1,
            num_heads: 2,
            ..ModelConfig::desk(vocab).with_hidden(16)
        };
        init_model(&config, 3).unwrap()
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 5,
            ..TrainConfig::pretrain()
        }
    }

    #[test]
    fn best_epoch_prefers_earliest_tie() {
        assert_eq!(select_best_epoch(&[0.5, 0.8, 0.8, 0.6]), Some(2));
        assert_eq!(select_best_epoch(&[]), None);
    }

    #[test]
    fn zero_epochs_return_init() {
        let init = tiny(12);
        let seqs = vec![vec![CLS, 6, 7, 8, SEP]; 4];
        let (out, log) = pretrain_mlm(&init, &seqs, &seqs, &quick(0)).unwrap();
        assert_eq!(out, init);
        assert!(log.steps.is_empty());
        let labeled = vec![LabeledSeq { ids: seqs[0].clone(), label: 1 }];
        let (out, log) = finetune(&init, &labeled, &labeled, &quick(0)).unwrap();
        assert_eq!(out, init);
        assert!(log.selected.is_none());
    }

    #[test]
    fn pretraining_is_deterministic() {
        let init = tiny(12);
        let seqs: Vec<Vec<TokenId>> = (0..6).map(|i| vec![CLS, 5 + i, 6, 7, 8, SEP]).collect();
        let a = pretrain_mlm(&init, &seqs, &seqs, &quick(2)).unwrap();
        let b = pretrain_mlm(&init, &seqs, &seqs, &quick(2)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.1.evals.len(), 2);
    }

    #[test]
    fn max_steps_caps_training() {
        let init = tiny(12);
        let seqs = vec![vec![CLS, 6, 7, 8, SEP]; 40];
        let config = TrainConfig {
            max_steps: Some(3),
            ..quick(5)
        };
        let (_, log) = pretrain_mlm(&init, &seqs, &seqs, &config).unwrap();
        assert_eq!(log.steps.len(), 3);
        assert_eq!(log.evals.last().unwrap().step, 3);
    }

    #[test]
    fn scripted_validator_selects_best_snapshot() {
        let init = tiny(12);
        let train = vec![LabeledSeq { ids: vec![CLS, 6, SEP], label: 0 }; 4];
        let script = [0.5, 0.8, 0.8, 0.6];
        let mut snapshots = Vec::new();
        let mut calls = 0;
        let (best, log) = finetune_with_validator(&init, &train, &quick(4), |c| {
            snapshots.push(c.clone());
            calls += 1;
            Ok(script[calls - 1])
        })
        .unwrap();
        assert_eq!(log.selected.unwrap().epoch, 2);
        assert_eq!(best, snapshots[1]);
        assert_ne!(best, snapshots[2]);
    }

    #[test]
    fn generator_is_half_width() {
        let g = generator_config(&ModelConfig::desk(40));
        assert_eq!(g.hidden_size, 32);
        assert_eq!(g.embedding_size, 32);
        assert_eq!(g.hidden_size % g.num_heads, 0);
        g.validate().unwrap();
    }

    #[test]
    fn fingerprint_mismatch_is_rejected() {
        let vocab = Vocab::from_tokens(["a", "b"]).unwrap();
        let ckpt = tiny(vocab.len());
        let err = pretrain_with_augmented_vocab(&ckpt, &vocab, &["a"], &["a"], 1, 16, &quick(1)).unwrap_err();
        assert!(err.to_string().contains("fingerprint"));
    }
}
