//! Tweet corpora: the TSV record format, validation sampling and the paired
//! examples used for replaced-token-detection pretraining.
//!
//! A corpus file is UTF-8 with one record per line, `id<TAB>label<TAB>text`,
//! no header row and LF line endings. The label is one of `positive`,
//! `negative`, `neutral`, or `-` for unlabeled pretraining data.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;

use crate::rng;
use crate::{Error, Result};

/// Sentiment polarity with the stable integer encoding used by model heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SentimentLabel {
    Negative = 0,
    Neutral = 1,
    Positive = 2,
}

impl SentimentLabel {
    pub const ALL: [SentimentLabel; 3] = [
        SentimentLabel::Negative,
        SentimentLabel::Neutral,
        SentimentLabel::Positive,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SentimentLabel::Negative => "negative",
            SentimentLabel::Neutral => "neutral",
            SentimentLabel::Positive => "positive",
        }
    }
}

impl fmt::Display for SentimentLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SentimentLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "negative" => Ok(SentimentLabel::Negative),
            "neutral" => Ok(SentimentLabel::Neutral),
            "positive" => Ok(SentimentLabel::Positive),
            other => Err(Error::Parse(format!("unknown label '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TweetRecord {
    pub id: String,
    pub text: String,
    pub label: Option<SentimentLabel>,
}

impl TweetRecord {
    /// Builds a record from raw ingested text. Tabs and line breaks cannot be
    /// represented in the TSV format and are replaced by spaces.
    pub fn new(id: impl Into<String>, text: &str, label: Option<SentimentLabel>) -> Self {
        let text = text
            .chars()
            .map(|c| if matches!(c, '\t' | '\n' | '\r') { ' ' } else { c })
            .collect();
        TweetRecord {
            id: id.into(),
            text,
            label,
        }
    }

    pub fn require_label(&self) -> Result<SentimentLabel> {
        self.label
            .ok_or_else(|| Error::Invalid(format!("record '{}' has no label", self.id)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub train: Vec<TweetRecord>,
    pub validation: Vec<TweetRecord>,
    pub seed: u64,
}

pub fn load_corpus(path: impl AsRef<Path>, labeled: bool) -> Result<Vec<TweetRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, labeled)
}

/// Parses corpus TSV text. Line numbers in errors are 1-based.
pub fn parse_corpus(text: &str, labeled: bool) -> Result<Vec<TweetRecord>> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.split('\n').enumerate() {
        let line_no = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse(format!(
                "expected 3 tab-separated fields, found {} at line {line_no}",
                fields.len()
            )));
        }
        let (id, label, body) = (fields[0], fields[1], fields[2]);
        if id.is_empty() {
            return Err(Error::Parse(format!("empty id at line {line_no}")));
        }
        if !seen.insert(id) {
            return Err(Error::Parse(format!("duplicate id '{id}' at line {line_no}")));
        }
        let label = match label {
            "-" => None,
            other => Some(
                other
                    .parse::<SentimentLabel>()
                    .map_err(|_| Error::Parse(format!("unknown label '{other}' at line {line_no}")))?,
            ),
        };
        if labeled && label.is_none() {
            return Err(Error::Parse(format!("missing label at line {line_no}")));
        }
        records.push(TweetRecord {
            id: id.to_string(),
            text: body.to_string(),
            label,
        });
    }
    Ok(records)
}

pub fn serialize_corpus(records: &[TweetRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.id);
        out.push('\t');
        out.push_str(r.label.map_or("-", SentimentLabel::as_str));
        out.push('\t');
        out.push_str(&r.text);
        out.push('\n');
    }
    out
}

pub fn save_corpus(records: &[TweetRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, serialize_corpus(records)).map_err(|e| Error::io(path, e))
}

/// Samples `n` records (or all of them, if fewer) uniformly without
/// replacement as the validation set. Both halves keep corpus order.
pub fn split_validation(records: &[TweetRecord], n: usize, seed: u64) -> CorpusSplit {
    let n = n.min(records.len());
    let mut rng = rng::seeded(rng::derive(seed, rng::stream::SPLIT, 0));
    let mut chosen = vec![false; records.len()];
    for i in index::sample(&mut rng, records.len(), n) {
        chosen[i] = true;
    }
    let mut train = Vec::with_capacity(records.len() - n);
    let mut validation = Vec::with_capacity(n);
    for (record, &is_valid) in records.iter().zip(&chosen) {
        if is_valid {
            validation.push(record.clone());
        } else {
            train.push(record.clone());
        }
    }
    CorpusSplit {
        train,
        validation,
        seed,
    }
}

/// Marker placed between the two tweets of a pretraining pair. It encodes to
/// the `[SEP]` special token.
pub const PAIR_SEPARATOR: &str = "[SEP]";

/// Joins non-overlapping consecutive tweets (stride 2) into single examples.
/// An odd trailing tweet is emitted alone.
pub fn build_electra_pairs<S: AsRef<str>>(tweets: &[S]) -> Vec<String> {
    tweets
        .chunks(2)
        .map(|pair| match pair {
            [a, b] => format!("{} {PAIR_SEPARATOR} {}", a.as_ref(), b.as_ref()),
            [a] => a.as_ref().to_string(),
            _ => unreachable!(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn records(n: usize) -> Vec<TweetRecord> {
        (0..n)
            .map(|i| TweetRecord::new(i.to_string(), &format!("tvīts {i}"), None))
            .collect()
    }

    #[test]
    fn parses_a_labeled_line() {
        let got = parse_corpus("1\tpositive\tlabdien!\n", true).unwrap();
        assert_eq!(
            got,
            vec![TweetRecord::new("1", "labdien!", Some(SentimentLabel::Positive))]
        );
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        assert!(parse_corpus("", true).unwrap().is_empty());
    }

    #[test]
    fn unknown_label_names_the_line() {
        let err = parse_corpus("1\thappy\tx", true).unwrap_err();
        assert_eq!(err.to_string(), "unknown label 'happy' at line 1");
    }

    #[test]
    fn wrong_field_count_names_the_line() {
        let err = parse_corpus("1\tpositive\tok\n2\tneutral\n", true).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = parse_corpus("1\tpositive\ta\tb\n", false).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn labeled_load_rejects_missing_label_and_duplicates() {
        assert!(parse_corpus("1\t-\tx\n", true).is_err());
        assert_eq!(parse_corpus("1\t-\tx\n", false).unwrap()[0].label, None);
        let err = parse_corpus("1\t-\tx\n1\t-\ty\n", false).unwrap_err();
        assert!(err.to_string().contains("duplicate id"));
    }

    #[test]
    fn ingestion_strips_tabs() {
        let r = TweetRecord::new("a", "x\ty\nz", None);
        assert_eq!(r.text, "x y z");
    }

    #[test]
    fn label_encoding_is_stable() {
        assert_eq!(SentimentLabel::Negative.index(), 0);
        assert_eq!(SentimentLabel::Neutral.index(), 1);
        assert_eq!(SentimentLabel::Positive.index(), 2);
        for l in SentimentLabel::ALL {
            assert_eq!(SentimentLabel::from_index(l.index()), Some(l));
            assert_eq!(l.as_str().parse::<SentimentLabel>().unwrap(), l);
        }
    }

    #[test]
    fn full_validation_when_n_equals_size() {
        let split = split_validation(&records(10), 10, 0);
        assert_eq!(split.validation.len(), 10);
        assert!(split.train.is_empty());
    }

    #[test]
    fn oversized_request_takes_everything() {
        let split = split_validation(&records(4), 100, 0);
        assert_eq!(split.validation.len(), 4);
    }

    #[test]
    fn split_is_deterministic() {
        let rs = records(10);
        assert_eq!(split_validation(&rs, 3, 7), split_validation(&rs, 3, 7));
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let rs = records(1000);
        let split = split_validation(&rs, 200, 1);
        assert_eq!(split.train.len(), 800);
        assert_eq!(split.validation.len(), 200);
        let train_ids: HashSet<_> = split.train.iter().map(|r| &r.id).collect();
        let valid_ids: HashSet<_> = split.validation.iter().map(|r| &r.id).collect();
        assert_eq!(train_ids.intersection(&valid_ids).count(), 0);
    }

    #[test]
    fn electra_pairs_are_strided() {
        let t = ["t1", "t2", "t3", "t4"];
        assert_eq!(build_electra_pairs(&t), vec!["t1 [SEP] t2", "t3 [SEP] t4"]);
        assert_eq!(build_electra_pairs(&["t1"]), vec!["t1"]);
        assert!(build_electra_pairs::<&str>(&[]).is_empty());
    }

    proptest! {
        #[test]
        fn split_preserves_the_multiset(n in 0usize..60, k in 0usize..80, seed in any::<u64>()) {
            // Repeated texts make the multiset check meaningful.
            let rs: Vec<_> = (0..n)
                .map(|i| TweetRecord::new(i.to_string(), &format!("t{}", i % 5), None))
                .collect();
            let split = split_validation(&rs, k, seed);
            prop_assert_eq!(split.validation.len(), k.min(n));
            let mut joined: Vec<_> = split.train.iter().chain(&split.validation).cloned().collect();
            let mut input = rs.clone();
            joined.sort_by(|a, b| a.id.cmp(&b.id));
            input.sort_by(|a, b| a.id.cmp(&b.id));
            prop_assert_eq!(joined, input);
        }

        #[test]
        fn pair_count_is_half_rounded_up(n in 0usize..50) {
            let tweets: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
            prop_assert_eq!(build_electra_pairs(&tweets).len(), n.div_ceil(2));
        }

        #[test]
        fn well_formed_files_round_trip(rows in proptest::collection::vec(
            ("[^\t\n\r]{0,20}", prop_oneof![Just("-"), Just("positive"), Just("negative"), Just("neutral")]),
            0..20,
        )) {
            let mut file = String::new();
            for (i, (text, label)) in rows.iter().enumerate() {
                file.push_str(&format!("id{i}\t{label}\t{text}\n"));
            }
            let parsed = parse_corpus(&file, false).unwrap();
            prop_assert_eq!(serialize_corpus(&parsed), file);
        }
    }
}
