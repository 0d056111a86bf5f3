use rand::seq::index;
use rand::Rng;

use super::TrainConfig;
use crate::rng;
use crate::tokenizer::{is_special, TokenId, MASK, NUM_SPECIAL};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Masked {
    pub corrupted: Vec<TokenId>,
    /// `(position, original id)` in increasing position order.
    pub targets: Vec<(usize, TokenId)>,
}

/// Selects `max(1, round(rate · candidates))` non-special positions (none
/// when the rate is zero) and corrupts them with the configured
/// mask/random/keep split. Random replacements are drawn from the
/// non-special tokens.
pub fn mask_tokens(ids: &[TokenId], vocab_size: usize, config: &TrainConfig, seed: u64) -> Masked {
    let candidates: Vec<usize> = (0..ids.len()).filter(|&i| !is_special(ids[i])).collect();
    let mut corrupted = ids.to_vec();
    if config.mask_rate <= 0.0 || candidates.is_empty() {
        return Masked {
            corrupted,
            targets: Vec::new(),
        };
    }
    let count = ((config.mask_rate * candidates.len() as f64).round() as usize).clamp(1, candidates.len());
    let mut rng = rng::seeded(seed);
    let mut picked: Vec<usize> = index::sample(&mut rng, candidates.len(), count)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    picked.sort_unstable();
    let split = config.mask_split;
    let mut targets = Vec::with_capacity(count);
    for pos in picked {
        targets.push((pos, ids[pos]));
        let r: f64 = rng.random();
        if r < split.mask {
            corrupted[pos] = MASK;
        } else if r < split.mask + split.random && vocab_size > NUM_SPECIAL {
            corrupted[pos] = rng.random_range(NUM_SPECIAL as TokenId..vocab_size as TokenId);
        }
    }
    Masked { corrupted, targets }
}
