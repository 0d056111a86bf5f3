//! Subword vocabulary, greedy longest-match encoding and emoticon
//! augmentation.
//!
//! A vocabulary file has one token per line; the line index is the token id.
//! The first five lines are always `[PAD] [UNK] [CLS] [SEP] [MASK]`.
//! Word-internal pieces carry the `##` continuation prefix.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const MASK: TokenId = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
pub const NUM_SPECIAL: usize = SPECIAL_TOKENS.len();
pub const CONTINUATION: &str = "##";

/// Words longer than this many characters encode to `[UNK]` directly.
const MAX_WORD_CHARS: usize = 100;

pub fn is_special(id: TokenId) -> bool {
    (id as usize) < NUM_SPECIAL
}

/// Code points in the Emoticons, Miscellaneous Symbols and Pictographs,
/// Supplemental Symbols and Pictographs, and Dingbats blocks.
pub fn is_emoticon_char(c: char) -> bool {
    matches!(c as u32,
        0x1F600..=0x1F64F | 0x1F300..=0x1F5FF | 0x1F900..=0x1F9FF | 0x2700..=0x27BF)
}

/// A surface form made only of emoticon code points (variation selectors
/// allowed).
pub fn is_emoticon(word: &str) -> bool {
    let mut any = false;
    for c in word.chars() {
        if c == '\u{FE0F}' {
            continue;
        }
        if !is_emoticon_char(c) {
            return false;
        }
        any = true;
    }
    any
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from the non-special tokens; the specials are
    /// prepended. Duplicates are an error.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let all = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(tokens.into_iter().map(Into::into));
        Self::from_all_tokens(all)
    }

    fn from_all_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut vocab = Vocab {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for token in tokens {
            vocab.push(token)?;
        }
        for (id, special) in SPECIAL_TOKENS.iter().enumerate() {
            if vocab.tokens.get(id).map(String::as_str) != Some(*special) {
                return Err(Error::Parse(format!(
                    "vocabulary must start with the special tokens {}; line {id} should be '{special}'",
                    SPECIAL_TOKENS.join(" ")
                )));
            }
        }
        Ok(vocab)
    }

    fn push(&mut self, token: String) -> Result<TokenId> {
        if token.is_empty() || token.chars().any(char::is_whitespace) {
            return Err(Error::Parse(format!(
                "token at line {} is empty or contains whitespace",
                self.tokens.len()
            )));
        }
        let id = self.tokens.len() as TokenId;
        if let Some(&first) = self.ids.get(&token) {
            return Err(Error::Parse(format!(
                "duplicate token '{token}' at lines {first} and {id}"
            )));
        }
        self.ids.insert(token.clone(), id);
        self.tokens.push(token);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// File contents: one token per line, LF terminated.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let body = text.strip_suffix('\n').unwrap_or(text);
        if body.is_empty() {
            return Self::from_all_tokens(Vec::new());
        }
        Self::from_all_tokens(body.split('\n').map(str::to_string))
    }

    /// 64-bit FNV-1a of the serialized vocabulary file.
    pub fn fingerprint(&self) -> u64 {
        fnv1a64(self.serialize().as_bytes())
    }

    /// Greedy longest-match split of one whitespace-free word, or `None` when
    /// no full decomposition exists.
    pub fn split_word(&self, word: &str) -> Option<Vec<TokenId>> {
        if word.chars().count() > MAX_WORD_CHARS {
            return None;
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        let mut candidate = String::new();
        while start < word.len() {
            let mut end = word.len();
            let mut found = None;
            while end > start {
                candidate.clear();
                if start > 0 {
                    candidate.push_str(CONTINUATION);
                }
                candidate.push_str(&word[start..end]);
                if let Some(id) = self.id(&candidate) {
                    found = Some(id);
                    break;
                }
                end = prev_boundary(word, end);
            }
            pieces.push(found?);
            start = end;
        }
        Some(pieces)
    }
}

fn prev_boundary(s: &str, mut i: usize) -> usize {
    i -= 1;
    while !s.is_char_boundary(i) {
        i -= 1;
    }
    i
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    hash
}

pub fn load_vocab(path: impl AsRef<Path>) -> Result<Vocab> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Vocab::parse(&text)
}

pub fn save_vocab(vocab: &Vocab, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, vocab.serialize()).map_err(|e| Error::io(path, e))
}

/// Fixed-length model input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoding {
    pub ids: Vec<TokenId>,
    pub mask: Vec<u8>,
}

impl Encoding {
    /// Number of non-pad positions.
    pub fn len(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The ids at non-pad positions.
    pub fn real_ids(&self) -> Vec<TokenId> {
        self.ids
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m == 1)
            .map(|(&id, _)| id)
            .collect()
    }
}

/// `[CLS] pieces [SEP]`, padded to `max_len`. When the pieces do not fit,
/// they are cut so that `[SEP]` still closes the sequence.
pub fn encode(text: &str, vocab: &Vocab, max_len: usize) -> Encoding {
    assert!(max_len >= 2, "max_len must be at least 2");
    let mut ids = vec![CLS];
    for word in text.split_whitespace() {
        match vocab.split_word(word) {
            Some(pieces) => ids.extend(pieces),
            None => ids.push(UNK),
        }
        if ids.len() >= max_len - 1 {
            break;
        }
    }
    ids.truncate(max_len - 1);
    ids.push(SEP);
    let real = ids.len();
    ids.resize(max_len, PAD);
    let mut mask = vec![1u8; real];
    mask.resize(max_len, 0);
    Encoding { ids, mask }
}

pub fn decode(ids: &[TokenId], vocab: &Vocab) -> Result<String> {
    let mut words: Vec<String> = Vec::new();
    for &id in ids {
        let token = vocab.token(id).ok_or_else(|| {
            Error::Invalid(format!("token id {id} out of range for vocabulary of {}", vocab.len()))
        })?;
        if matches!(id, PAD | CLS | SEP) {
            continue;
        }
        match token.strip_prefix(CONTINUATION) {
            Some(rest) if !rest.is_empty() => match words.last_mut() {
                Some(last) => last.push_str(rest),
                None => words.push(rest.to_string()),
            },
            _ => words.push(token.to_string()),
        }
    }
    Ok(words.join(" "))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UnknownAudit {
    pub frequencies: BTreeMap<String, usize>,
    pub emoticons: BTreeMap<String, usize>,
}

impl UnknownAudit {
    pub fn unique_unknowns(&self) -> usize {
        self.frequencies.len()
    }

    /// Emoticons by descending count, ties by ascending code point order.
    pub fn ranked_emoticons(&self) -> Vec<(&str, usize)> {
        let mut ranked: Vec<(&str, usize)> =
            self.emoticons.iter().map(|(k, &v)| (k.as_str(), v)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked
    }

    /// TSV: `surface<TAB>count<TAB>emoticon|other`, most frequent first.
    pub fn serialize(&self) -> String {
        let mut rows: Vec<(&String, &usize)> = self.frequencies.iter().collect();
        rows.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        let mut out = String::new();
        for (surface, count) in rows {
            let kind = if self.emoticons.contains_key(surface) {
                "emoticon"
            } else {
                "other"
            };
            let _ = writeln!(out, "{surface}\t{count}\t{kind}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut audit = UnknownAudit::default();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Parse(format!("malformed audit row at line {}", i + 1));
            let [surface, count, kind] = fields[..] else {
                return Err(bad());
            };
            let count: usize = count.parse().map_err(|_| bad())?;
            if count == 0 || surface.is_empty() {
                return Err(bad());
            }
            audit.frequencies.insert(surface.to_string(), count);
            match kind {
                "emoticon" => {
                    audit.emoticons.insert(surface.to_string(), count);
                }
                "other" => {}
                _ => return Err(bad()),
            }
        }
        Ok(audit)
    }
}

/// Tallies every whitespace word of the corpus that encodes to `[UNK]`.
pub fn audit_unknowns<S: AsRef<str>>(corpus: &[S], vocab: &Vocab) -> UnknownAudit {
    let mut audit = UnknownAudit::default();
    for text in corpus {
        for word in text.as_ref().split_whitespace() {
            if vocab.split_word(word).is_none() {
                *audit.frequencies.entry(word.to_string()).or_default() += 1;
                if is_emoticon(word) {
                    *audit.emoticons.entry(word.to_string()).or_default() += 1;
                }
            }
        }
    }
    audit
}

/// Appends the `k` most frequent unknown emoticons. Existing ids never move.
pub fn augment_vocab(vocab: &Vocab, audit: &UnknownAudit, k: usize) -> Vocab {
    let mut out = vocab.clone();
    for (emoticon, _) in audit.ranked_emoticons() {
        if out.len() - vocab.len() == k {
            break;
        }
        if out.id(emoticon).is_none() {
            out.push(emoticon.to_string())
                .expect("emoticon surface forms are non-empty and whitespace-free");
        }
    }
    out
}
