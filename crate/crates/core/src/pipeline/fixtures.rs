//! Synthetic Latvian-flavoured tweet fixtures.
//!
//! Words are built from a stem plus an inflectional ending so the vocabulary
//! exercises `##` continuation pieces. Raw tweets carry mentions, URLs and
//! mixed case for the preprocessing step; emoticons never appear in the base
//! vocabulary.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::corpus::{SentimentLabel, TweetRecord};
use crate::rng::{self, LabRng};
use crate::tokenizer::{Vocab, CONTINUATION};
use crate::Result;

pub const POSITIVE_STEMS: &[&str] = &["lab", "lielisk", "priecīg", "jauk", "brīnišķīg"];
pub const NEGATIVE_STEMS: &[&str] = &["slikt", "bēdīg", "dusmīg", "garlaicīg", "šausmīg"];
pub const TOPIC_STEMS: &[&str] = &[
    "vilcien", "skol", "darb", "laik", "pilsēt", "kafij", "grāmat", "dien", "māj", "ziņ", "spēl", "vakar",
];
pub const ENDINGS: &[&str] = &["s", "a", "i", "u", "ais", "ā", "as", "ie"];
pub const FUNCTION_WORDS: &[&str] = &[
    "es", "tu", "mēs", "viņi", "šodien", "rīt", "ir", "bija", "būs", "un", "bet", "ļoti", "nav", "jā", "kā", "uz",
    "ar", "par", "man", "tev", "tas", "šis",
];
pub const PUNCTUATION: &[&str] = &["!", "?", ".", ",", ":"];
pub const POSITIVE_EMOTICONS: &[&str] = &["😊", "😍", "👍"];
pub const NEGATIVE_EMOTICONS: &[&str] = &["😢", "😡", "👎"];
pub const NAMES: &[&str] = &["Janis", "Anna", "LSM_lv", "Delfi", "Maris", "ilze99"];
const MAX_MENTIONS: usize = 4;

/// Specials, punctuation, function words, stems, `##` endings and mention
/// placeholders; no emoticons.
pub fn base_vocab() -> Vocab {
    let mut tokens: Vec<String> = Vec::new();
    tokens.extend(PUNCTUATION.iter().map(|s| s.to_string()));
    tokens.extend(FUNCTION_WORDS.iter().map(|s| s.to_string()));
    for stems in [POSITIVE_STEMS, NEGATIVE_STEMS, TOPIC_STEMS] {
        tokens.extend(stems.iter().map(|s| s.to_string()));
    }
    tokens.extend(ENDINGS.iter().map(|e| format!("{CONTINUATION}{e}")));
    tokens.extend((1..=MAX_MENTIONS).map(|i| format!("mention_{i}")));
    Vocab::from_tokens(tokens).expect("fixture lexicon has no duplicates")
}

fn word(r: &mut LabRng, stems: &[&str]) -> String {
    format!("{}{}", stems.choose(r).unwrap(), ENDINGS.choose(r).unwrap())
}

fn filler(r: &mut LabRng, n: usize) -> Vec<String> {
    (0..n)
        .map(|_| {
            if r.random_bool(0.5) {
                FUNCTION_WORDS.choose(r).unwrap().to_string()
            } else {
                word(r, TOPIC_STEMS)
            }
        })
        .collect()
}

fn capitalize(w: &str) -> String {
    let mut chars = w.chars();
    chars.next().map_or_else(String::new, |c| c.to_uppercase().chain(chars).collect())
}

/// Adds the raw-text noise the preprocessing step removes.
fn decorate(r: &mut LabRng, mut words: Vec<String>) -> String {
    if r.random_bool(0.3) {
        let run = r.random_range(1..=3);
        for _ in 0..run {
            words.insert(0, format!("@{}", NAMES.choose(r).unwrap()));
        }
    }
    if r.random_bool(0.2) {
        let at = r.random_range(0..=words.len());
        words.insert(at, format!("@{}", NAMES.choose(r).unwrap()));
    }
    if r.random_bool(0.25) {
        let tail = r.random_range(1000..9999);
        words.push(format!("https://t.co/x{tail}"));
    }
    if let Some(first) = words.first_mut() {
        if r.random_bool(0.5) {
            *first = capitalize(first);
        }
    }
    if r.random_bool(0.1) {
        let i = r.random_range(0..words.len());
        words[i] = words[i].to_uppercase();
    }
    words.join(" ")
}

/// Neutral-register sentences for the base checkpoint.
pub fn generic_corpus(n: usize, seed: u64) -> Vec<TweetRecord> {
    let mut r = rng::seeded(rng::derive(seed, rng::stream::FIXTURE, 0));
    (0..n)
        .map(|i| {
            let len = r.random_range(4..10);
            let mut words = filler(&mut r, len);
            if r.random_bool(0.2) {
                let stems = if r.random_bool(0.5) { POSITIVE_STEMS } else { NEGATIVE_STEMS };
                let at = r.random_range(0..words.len());
                words[at] = word(&mut r, stems);
            }
            words.push(PUNCTUATION.choose(&mut r).unwrap().to_string());
            TweetRecord::new(format!("g{i}"), &words.join(" "), None)
        })
        .collect()
}

fn sentiment_tweet(r: &mut LabRng, label: SentimentLabel) -> String {
    let len = r.random_range(3..8);
    let mut words = filler(r, len);
    let (stems, emoticons) = match label {
        SentimentLabel::Positive => (Some(POSITIVE_STEMS), Some(POSITIVE_EMOTICONS)),
        SentimentLabel::Negative => (Some(NEGATIVE_STEMS), Some(NEGATIVE_EMOTICONS)),
        SentimentLabel::Neutral => (None, None),
    };
    let cue_word = r.random_bool(0.5);
    if let (Some(stems), true) = (stems, cue_word) {
        let at = r.random_range(0..=words.len());
        words.insert(at, word(r, stems));
    }
    // Tweets without a sentiment word mostly carry an emoticon instead.
    let emoticon_p = if cue_word { 0.4 } else { 0.85 };
    if let Some(emoticons) = emoticons {
        if r.random_bool(emoticon_p) {
            let e = emoticons.choose(r).unwrap();
            if r.random_bool(0.5) {
                words.push(e.to_string());
            } else {
                let last = words.pop().unwrap_or_default();
                words.push(format!("{last}{e}"));
            }
        }
    } else if r.random_bool(0.1) {
        let pool = if r.random_bool(0.5) { POSITIVE_EMOTICONS } else { NEGATIVE_EMOTICONS };
        words.push(pool.choose(r).unwrap().to_string());
    }
    if r.random_bool(0.5) {
        words.push(PUNCTUATION.choose(r).unwrap().to_string());
    }
    decorate(r, words)
}

fn label_at(r: &mut LabRng) -> SentimentLabel {
    SentimentLabel::from_index(r.random_range(0..3)).unwrap()
}

/// In-domain tweets without labels.
pub fn unlabeled_tweets(n: usize, seed: u64) -> Vec<TweetRecord> {
    let mut r = rng::seeded(rng::derive(seed, rng::stream::FIXTURE, 1));
    (0..n)
        .map(|i| {
            let label = label_at(&mut r);
            TweetRecord::new(format!("u{i}"), &sentiment_tweet(&mut r, label), None)
        })
        .collect()
}

/// Labeled in-domain tweets; `stream` separates train and test draws.
pub fn labeled_tweets(n: usize, seed: u64, stream: u64) -> Vec<TweetRecord> {
    let mut r = rng::seeded(rng::derive(seed, rng::stream::FIXTURE, 2 + stream));
    (0..n)
        .map(|i| {
            let label = label_at(&mut r);
            TweetRecord::new(format!("t{stream}_{i}"), &sentiment_tweet(&mut r, label), Some(label))
        })
        .collect()
}

/// Tweets whose polarity is carried only by `😊` (positive) or `😢`
/// (negative); neutral tweets have no emoticon. The rest of the text is drawn
/// from the same distribution for every class.
pub fn emoticon_polarity_corpus(n: usize, seed: u64) -> Vec<TweetRecord> {
    let mut r = rng::seeded(rng::derive(seed, rng::stream::FIXTURE, 9));
    (0..n)
        .map(|i| {
            let label = label_at(&mut r);
            let len = r.random_range(3..8);
            let mut words = filler(&mut r, len);
            let emoticon = match label {
                SentimentLabel::Positive => Some("😊"),
                SentimentLabel::Negative => Some("😢"),
                SentimentLabel::Neutral => None,
            };
            if let Some(e) = emoticon {
                let at = r.random_range(0..=words.len());
                words.insert(at, e.to_string());
            }
            TweetRecord::new(format!("e{i}"), &decorate(&mut r, words), Some(label))
        })
        .collect()
}

/// Checks the fixture lexicon encodes every fixture word without `[UNK]`
/// apart from emoticons.
pub fn check_lexicon(vocab: &Vocab) -> Result<()> {
    for stems in [POSITIVE_STEMS, NEGATIVE_STEMS, TOPIC_STEMS] {
        for s in stems {
            for e in ENDINGS {
                if vocab.split_word(&format!("{s}{e}")).is_none() {
                    return Err(crate::Error::Invalid(format!("fixture word {s}{e} is not encodable")));
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{normalize_tweet, PreprocessRules};
    use crate::tokenizer::{audit_unknowns, encode, UNK};

    #[test]
    fn lexicon_covers_fixture_words() {
        check_lexicon(&base_vocab()).unwrap();
    }

    #[test]
    fn only_emoticons_are_unknown() {
        let vocab = base_vocab();
        let rules = PreprocessRules::default();
        let texts: Vec<String> = labeled_tweets(300, 1, 0)
            .iter()
            .chain(&unlabeled_tweets(300, 1))
            .map(|t| normalize_tweet(&t.text, &rules))
            .collect();
        let audit = audit_unknowns(&texts, &vocab);
        assert!(!audit.emoticons.is_empty());
        assert_eq!(audit.unique_unknowns(), audit.emoticons.len(), "{:?}", audit.frequencies);
    }

    #[test]
    fn emoticon_corpus_marks_polarity() {
        let vocab = base_vocab();
        let rules = PreprocessRules::default();
        for t in emoticon_polarity_corpus(200, 4) {
            let text = normalize_tweet(&t.text, &rules);
            let unknowns = encode(&text, &vocab, 64).ids.iter().filter(|&&i| i == UNK).count();
            let expected = usize::from(t.label != Some(SentimentLabel::Neutral));
            assert_eq!(unknowns, expected, "{text}");
        }
    }

    #[test]
    fn fixtures_are_deterministic() {
        assert_eq!(labeled_tweets(20, 3, 0), labeled_tweets(20, 3, 0));
        assert_ne!(labeled_tweets(20, 3, 0), labeled_tweets(20, 4, 0));
    }
}
