//! Tweet normalization.
//!
//! Rules are applied in a fixed order: basic tokenization, URL removal,
//! collapsing of adjacent user mentions, numbering of the surviving mentions
//! with a placeholder, and lowercasing. The result is the surviving tokens
//! joined by single spaces.

use crate::tokenizer::is_emoticon_char;
use crate::{Error, Result};

const INDEX_SLOT: &str = "{}";
const VARIATION_SELECTOR: char = '\u{FE0F}';

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreprocessRules {
    mention_template: String,
    pub remove_urls: bool,
    pub lowercase: bool,
}

impl Default for PreprocessRules {
    fn default() -> Self {
        PreprocessRules {
            mention_template: "mention_{}".to_string(),
            remove_urls: true,
            lowercase: true,
        }
    }
}

impl PreprocessRules {
    /// `template` must contain exactly one `{}` slot for the mention ordinal.
    pub fn with_mention_template(mut self, template: &str) -> Result<Self> {
        if template.matches(INDEX_SLOT).count() != 1 {
            return Err(Error::Config(format!(
                "mention template '{template}' must contain exactly one '{INDEX_SLOT}'"
            )));
        }
        let sample = template.replacen(INDEX_SLOT, "1", 1);
        if !sample.chars().all(is_word_char) || is_url(&sample) {
            return Err(Error::Config(format!(
                "mention template '{template}' must be a single word without punctuation"
            )));
        }
        self.mention_template = template.to_string();
        Ok(self)
    }

    pub fn mention_template(&self) -> &str {
        &self.mention_template
    }

    fn mention(&self, ordinal: usize) -> String {
        self.mention_template.replacen(INDEX_SLOT, &ordinal.to_string(), 1)
    }
}

/// True if the token starts with `http://`, `https://` or `www.`, ignoring
/// ASCII case so that lowercasing can never turn a kept token into a URL.
pub fn is_url(token: &str) -> bool {
    ["http://", "https://", "www."].iter().any(|prefix| {
        token
            .get(..prefix.len())
            .is_some_and(|head| head.eq_ignore_ascii_case(prefix))
    })
}

/// Characters detached into their own tokens. The underscore counts as a
/// word character.
pub fn is_punctuation(c: char) -> bool {
    (c.is_ascii_punctuation() && c != '_')
        || matches!(c as u32,
            0x00A1..=0x00BF | 0x00D7 | 0x00F7 | 0x2010..=0x2027 | 0x2030..=0x205E
            | 0x3000..=0x303F | 0xFF01..=0xFF0F)
        || is_emoticon_char(c)
}

fn is_word_char(c: char) -> bool {
    !c.is_whitespace() && !is_punctuation(c)
}

/// A mention is `@` followed by at least one word character.
pub fn is_mention(token: &str) -> bool {
    let mut chars = token.chars();
    chars.next() == Some('@') && {
        let rest: Vec<char> = chars.collect();
        !rest.is_empty() && rest.iter().all(|&c| is_word_char(c))
    }
}

/// Whitespace splitting plus punctuation detachment. URLs are kept whole up
/// to the next whitespace, mentions run over the following word characters,
/// and an emoticon keeps a trailing variation selector.
pub fn basic_tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<(usize, char)> = chunk.char_indices().collect();
        let mut i = 0;
        while i < chars.len() {
            let (start, c) = chars[i];
            if is_url(&chunk[start..]) {
                tokens.push(chunk[start..].to_string());
                break;
            }
            if c == '@' && chars.get(i + 1).is_some_and(|&(_, n)| is_word_char(n)) {
                let mut j = i + 1;
                while j < chars.len() && is_word_char(chars[j].1) {
                    j += 1;
                }
                tokens.push(slice(chunk, &chars, i, j).to_string());
                i = j;
            } else if is_punctuation(c) {
                let mut j = i + 1;
                if is_emoticon_char(c) && chars.get(j).is_some_and(|&(_, n)| n == VARIATION_SELECTOR) {
                    j += 1;
                }
                tokens.push(slice(chunk, &chars, i, j).to_string());
                i = j;
            } else {
                let mut j = i + 1;
                while j < chars.len()
                    && is_word_char(chars[j].1)
                    && !is_url(&chunk[chars[j].0..])
                {
                    j += 1;
                }
                tokens.push(slice(chunk, &chars, i, j).to_string());
                i = j;
            }
        }
    }
    tokens
}

fn slice<'a>(chunk: &'a str, chars: &[(usize, char)], from: usize, to: usize) -> &'a str {
    let end = chars.get(to).map_or(chunk.len(), |&(b, _)| b);
    &chunk[chars[from].0..end]
}

pub fn normalize_tweet(raw: &str, rules: &PreprocessRules) -> String {
    let mut tokens = basic_tokenize(raw);
    if rules.remove_urls {
        tokens.retain(|t| !is_url(t));
    }
    tokens.dedup_by(|next, prev| is_mention(prev) && is_mention(next));
    let mut ordinal = 0;
    for token in tokens.iter_mut() {
        if is_mention(token) {
            ordinal += 1;
            *token = rules.mention(ordinal);
        }
    }
    let joined = tokens.join(" ");
    if rules.lowercase {
        joined.to_lowercase()
    } else {
        joined
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn norm(s: &str) -> String {
        normalize_tweet(s, &PreprocessRules::default())
    }

    #[test]
    fn applies_all_rules_in_order() {
        assert_eq!(norm("Labdien @John @Mary! http://tilde.lv"), "labdien mention_1 !");
    }

    #[test]
    fn numbers_mentions_by_occurrence() {
        assert_eq!(norm("@a x @b y"), "mention_1 x mention_2 y");
    }

    #[test]
    fn empty_input() {
        assert_eq!(norm(""), "");
        assert_eq!(norm("   \t "), "");
    }

    #[test]
    fn url_prefixes() {
        assert!(is_url("https://x.lv/a"));
        assert!(!is_url("labdien"));
        assert!(is_url("www.delfi.lv"));
        assert!(is_url("HTTP://X.LV"));
        assert!(!is_url("www"));
    }

    #[test]
    fn mentions_separated_by_a_removed_url_collapse() {
        assert_eq!(norm("@a https://t.co/x @b hi"), "mention_1 hi");
    }

    #[test]
    fn url_after_punctuation_is_removed() {
        assert_eq!(norm("skat (http://x.lv/a?b=c)"), "skat (");
    }

    #[test]
    fn latvian_diacritics_lowercase() {
        assert_eq!(norm("ĀBOLS Ēst ŠODIEN Ņ"), "ābols ēst šodien ņ");
    }

    #[test]
    fn punctuation_and_emoticons_are_detached() {
        assert_eq!(basic_tokenize("super!!😊😊"), vec!["super", "!", "!", "😊", "😊"]);
        assert_eq!(basic_tokenize("❤\u{FE0F}labi"), vec!["❤\u{FE0F}", "labi"]);
        assert_eq!(basic_tokenize("@jānis,"), vec!["@jānis", ","]);
        assert_eq!(basic_tokenize("a @ b"), vec!["a", "@", "b"]);
    }

    #[test]
    fn custom_template() {
        let rules = PreprocessRules::default().with_mention_template("@@{}").unwrap_err();
        assert!(rules.to_string().contains("@"));
        let rules = PreprocessRules::default().with_mention_template("USER{}").unwrap();
        assert_eq!(normalize_tweet("@x hi", &rules), "user1 hi");
        assert!(PreprocessRules::default().with_mention_template("m").is_err());
        assert!(PreprocessRules::default().with_mention_template("m{}{}").is_err());
    }

    #[test]
    fn switches_can_disable_rules() {
        let rules = PreprocessRules {
            remove_urls: false,
            lowercase: false,
            ..PreprocessRules::default()
        };
        assert_eq!(normalize_tweet("Hi www.x.lv @A", &rules), "Hi www.x.lv mention_1");
    }

    proptest! {
        #[test]
        fn idempotent_on_arbitrary_text(s in "\\PC{0,40}") {
            let once = norm(&s);
            prop_assert_eq!(norm(&once), once.clone());
            prop_assert_eq!(once.to_lowercase(), once);
        }
    }
}
