use rand::Rng;

use super::{mask_tokens, TrainConfig};
use crate::model::ops::{log_sum_exp, sigmoid, softplus};
use crate::model::{Gradients, Model, Scalar};
use crate::rng;
use crate::tokenizer::{TokenId, NUM_SPECIAL};
use crate::{Error, Result};

/// Seed for masking during perplexity evaluation, fixed so the stopping
/// criterion does not move with the training seed.
const EVAL_MASK_SEED: u64 = 0x7E57_5EED;

fn ones(n: usize) -> Vec<u8> {
    vec![1; n]
}

/// Sum of masked-token cross-entropies; gradients are of `scale × sum`.
pub(crate) fn mlm_sum<T: Scalar>(
    model: &Model<T>,
    corrupted: &[TokenId],
    targets: &[(usize, TokenId)],
    grad_scale: Option<T>,
) -> Result<(T, Option<Gradients<T>>)> {
    let trace = model.forward(corrupted, &ones(corrupted.len()))?;
    let positions: Vec<usize> = targets.iter().map(|&(p, _)| p).collect();
    if let Some(&p) = positions.iter().find(|&&p| p >= corrupted.len()) {
        return Err(Error::Invalid(format!("masked position {p} outside the sequence")));
    }
    let mlm = model.mlm_forward(&trace.output, &positions);
    let v = model.config().vocab_size;
    let mut sum = T::zero();
    let mut d_logits = grad_scale.map(|_| vec![T::zero(); mlm.logits.len()]);
    for (i, (row, &(_, target))) in mlm.logits.chunks_exact(v).zip(targets).enumerate() {
        let lse = log_sum_exp(row);
        sum += lse - row[target as usize];
        if let (Some(d), Some(scale)) = (d_logits.as_mut(), grad_scale) {
            let drow = &mut d[i * v..(i + 1) * v];
            for (dl, &l) in drow.iter_mut().zip(row) {
                *dl = (l - lse).exp() * scale;
            }
            drow[target as usize] -= scale;
        }
    }
    let grads = d_logits.map(|d| {
        let mut grads = Gradients::zeros_like(model);
        let d_hidden = model.mlm_backward(&mlm, corrupted.len(), &d, &mut grads);
        model.backward(&trace, &d_hidden, &mut grads);
        grads
    });
    Ok((sum, grads))
}

/// Mean cross-entropy over masked positions, with gradients for every
/// parameter.
pub fn mlm_loss<T: Scalar>(
    model: &Model<T>,
    corrupted: &[TokenId],
    targets: &[(usize, TokenId)],
) -> Result<(T, Gradients<T>)> {
    if targets.is_empty() {
        return Err(Error::Invalid("no masked positions".into()));
    }
    let inv = T::of(1.0 / targets.len() as f64);
    let (sum, grads) = mlm_sum(model, corrupted, targets, Some(inv))?;
    Ok((sum * inv, grads.expect("gradients requested")))
}

pub fn mlm_loss_value<T: Scalar>(model: &Model<T>, corrupted: &[TokenId], targets: &[(usize, TokenId)]) -> Result<T> {
    if targets.is_empty() {
        return Err(Error::Invalid("no masked positions".into()));
    }
    let (sum, _) = mlm_sum(model, corrupted, targets, None)?;
    Ok(sum / T::of(targets.len() as f64))
}

/// Mean of `softplus(x) − y·x` over positions.
pub fn binary_cross_entropy<T: Scalar>(logits: &[T], labels: &[bool]) -> T {
    let n = T::of(logits.len().max(1) as f64);
    logits
        .iter()
        .zip(labels)
        .map(|(&x, &y)| softplus(x) - if y { x } else { T::zero() })
        .sum::<T>()
        / n
}

/// Mean per-position binary cross-entropy of the discriminator head
/// (label `true` = replaced); gradients are of `weight × loss`.
pub fn discriminator_loss<T: Scalar>(
    model: &Model<T>,
    ids: &[TokenId],
    labels: &[bool],
    weight: T,
) -> Result<(T, Gradients<T>, Vec<T>)> {
    if labels.len() != ids.len() {
        return Err(Error::Invalid("one label per position required".into()));
    }
    let trace = model.forward(ids, &ones(ids.len()))?;
    let disc = model.disc_forward(&trace.output);
    let loss = binary_cross_entropy(&disc.logits, labels);
    let scale = weight / T::of(ids.len().max(1) as f64);
    let d_logits: Vec<T> = disc
        .logits
        .iter()
        .zip(labels)
        .map(|(&x, &y)| (sigmoid(x) - if y { T::one() } else { T::zero() }) * scale)
        .collect();
    let mut grads = Gradients::zeros_like(model);
    let d_hidden = model.disc_backward(&trace.output, &disc, &d_logits, &mut grads);
    model.backward(&trace, &d_hidden, &mut grads);
    Ok((loss, grads, disc.logits))
}

/// Cross-entropy of the `[CLS]` head for one labeled sequence.
pub fn classification_loss<T: Scalar>(
    model: &Model<T>,
    ids: &[TokenId],
    label: usize,
    dropout_seed: Option<u64>,
) -> Result<(T, Gradients<T>)> {
    let trace = model.forward(ids, &ones(ids.len()))?;
    let cls = model.cls_forward(&trace.output, dropout_seed);
    let loss = log_sum_exp(&cls.logits) - cls.logits[label];
    let mut d_logits = cls.probs.clone();
    d_logits[label] -= T::one();
    let mut grads = Gradients::zeros_like(model);
    let d_hidden = model.cls_backward(&cls, ids.len(), &d_logits, &mut grads);
    model.backward(&trace, &d_hidden, &mut grads);
    Ok((loss, grads))
}

#[derive(Debug, Clone)]
pub struct ElectraLoss<T> {
    /// `generator_loss + λ · discriminator_loss`
    pub total: T,
    pub generator_loss: T,
    pub discriminator_loss: T,
    pub generator_grads: Gradients<T>,
    pub discriminator_grads: Gradients<T>,
    /// Input seen by the discriminator.
    pub discriminator_input: Vec<TokenId>,
    pub replaced: Vec<bool>,
    pub discriminator_logits: Vec<T>,
}

/// Draws a non-special token from the softmax of one logit row.
fn sample_token<T: Scalar, R: Rng>(row: &[T], rng: &mut R) -> TokenId {
    let tail = &row[NUM_SPECIAL..];
    let lse = log_sum_exp(tail).to_f64().unwrap();
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &l) in tail.iter().enumerate() {
        acc += (l.to_f64().unwrap() - lse).exp();
        if u < acc {
            return (NUM_SPECIAL + i) as TokenId;
        }
    }
    (row.len() - 1) as TokenId
}

/// Joint replaced-token-detection objective on one sequence.
///
/// Masked positions are filled by sampling the generator's output
/// distribution; the discriminator labels a position replaced when the sample
/// differs from the original token. Gradients of the discriminator term do
/// not flow into the generator.
pub fn electra_loss<T: Scalar>(
    generator: &Model<T>,
    discriminator: &Model<T>,
    ids: &[TokenId],
    config: &TrainConfig,
    seed: u64,
) -> Result<ElectraLoss<T>> {
    let v = generator.config().vocab_size;
    if v != discriminator.config().vocab_size {
        return Err(Error::Invalid(format!(
            "generator vocabulary ({v}) differs from discriminator vocabulary ({})",
            discriminator.config().vocab_size
        )));
    }
    let masked = mask_tokens(ids, v, config, rng::derive(seed, rng::stream::MASK, 0));
    let mut disc_input = ids.to_vec();
    let (generator_loss, generator_grads) = if masked.targets.is_empty() {
        (T::zero(), Gradients::zeros_like(generator))
    } else {
        let trace = generator.forward(&masked.corrupted, &ones(ids.len()))?;
        let positions: Vec<usize> = masked.targets.iter().map(|&(p, _)| p).collect();
        let mlm = generator.mlm_forward(&trace.output, &positions);
        let inv = T::of(1.0 / positions.len() as f64);
        let mut loss = T::zero();
        let mut d_logits = vec![T::zero(); mlm.logits.len()];
        let mut rng = rng::seeded(rng::derive(seed, rng::stream::SAMPLE, 0));
        for (i, (row, &(pos, target))) in mlm.logits.chunks_exact(v).zip(&masked.targets).enumerate() {
            let lse = log_sum_exp(row);
            loss += (lse - row[target as usize]) * inv;
            let drow = &mut d_logits[i * v..(i + 1) * v];
            for (d, &l) in drow.iter_mut().zip(row) {
                *d = (l - lse).exp() * inv;
            }
            drow[target as usize] -= inv;
            disc_input[pos] = sample_token(row, &mut rng);
        }
        let mut grads = Gradients::zeros_like(generator);
        let d_hidden = generator.mlm_backward(&mlm, ids.len(), &d_logits, &mut grads);
        generator.backward(&trace, &d_hidden, &mut grads);
        (loss, grads)
    };
    let replaced: Vec<bool> = disc_input.iter().zip(ids).map(|(a, b)| a != b).collect();
    let weight = T::of(config.electra_weight);
    let (discriminator_loss, discriminator_grads, discriminator_logits) =
        super::discriminator_loss(discriminator, &disc_input, &replaced, weight)?;
    Ok(ElectraLoss {
        total: generator_loss + weight * discriminator_loss,
        generator_loss,
        discriminator_loss,
        generator_grads,
        discriminator_grads,
        discriminator_input: disc_input,
        replaced,
        discriminator_logits,
    })
}

/// `exp` of the mean masked-token cross-entropy over the corpus, masking each
/// sequence with a fixed evaluation seed.
pub fn perplexity<T: Scalar>(model: &Model<T>, corpus: &[Vec<TokenId>], config: &TrainConfig) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Invalid("empty corpus".into()));
    }
    let v = model.config().vocab_size;
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, ids) in corpus.iter().enumerate() {
        let masked = mask_tokens(ids, v, config, rng::derive(EVAL_MASK_SEED, rng::stream::EVAL_MASK, i as u64));
        if masked.targets.is_empty() {
            continue;
        }
        let (sum, _) = mlm_sum(model, &masked.corrupted, &masked.targets, None)?;
        total += sum.to_f64().unwrap();
        count += masked.targets.len();
    }
    if count == 0 {
        return Err(Error::Invalid("corpus has no maskable tokens".into()));
    }
    Ok((total / count as f64).exp())
}
