//! Accuracy, confusion matrices and result tables.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::corpus::{SentimentLabel, TweetRecord};
use crate::model::{Checkpoint, Model};
use crate::tokenizer::{encode, TokenId, Vocab};
use crate::{Error, Result};

/// Argmax with ties broken toward the lowest index.
pub fn argmax(probs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Predicted class and probabilities for real-position ids, inference mode.
pub fn predict_ids(model: &Model<f32>, ids: &[TokenId]) -> Result<(usize, [f32; 3])> {
    let hidden = model.encode_sequence(ids, &vec![1; ids.len()])?;
    let probs = model.classify_cls(&hidden, false, 0);
    Ok((argmax(&probs), probs))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub truth: SentimentLabel,
    pub predicted: SentimentLabel,
    pub probs: [f32; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Rows are true labels, columns predictions, both in label-index order.
    pub confusion: [[usize; 3]; 3],
    pub predictions: Vec<Prediction>,
}

impl EvalReport {
    pub fn from_predictions(predictions: Vec<Prediction>) -> Self {
        let mut confusion = [[0usize; 3]; 3];
        for p in &predictions {
            confusion[p.truth.index()][p.predicted.index()] += 1;
        }
        let correct: usize = (0..3).map(|i| confusion[i][i]).sum();
        let accuracy = if predictions.is_empty() {
            0.0
        } else {
            correct as f64 / predictions.len() as f64
        };
        EvalReport {
            accuracy,
            confusion,
            predictions,
        }
    }

    /// Unweighted mean of per-class F1; classes absent from both truth and
    /// predictions are skipped.
    pub fn macro_f1(&self) -> f64 {
        let c = &self.confusion;
        let mut scores = Vec::new();
        for k in 0..3 {
            let tp = c[k][k] as f64;
            let actual: usize = c[k].iter().sum();
            let predicted: usize = (0..3).map(|r| c[r][k]).sum();
            if actual + predicted == 0 {
                continue;
            }
            scores.push(2.0 * tp / (actual + predicted) as f64);
        }
        if scores.is_empty() {
            0.0
        } else {
            scores.iter().sum::<f64>() / scores.len() as f64
        }
    }

    /// Key/value summary followed by the confusion matrix.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "accuracy\t{:.6}", self.accuracy);
        let _ = writeln!(out, "macro_f1\t{:.6}", self.macro_f1());
        let _ = writeln!(out, "count\t{}", self.predictions.len());
        out.push_str("true\\pred");
        for l in SentimentLabel::ALL {
            let _ = write!(out, "\t{l}");
        }
        out.push('\n');
        for l in SentimentLabel::ALL {
            out.push_str(l.as_str());
            for n in self.confusion[l.index()] {
                let _ = write!(out, "\t{n}");
            }
            out.push('\n');
        }
        out
    }

    pub fn predictions_tsv(&self) -> String {
        let mut out = String::from("id\ttrue\tpred\tp_neg\tp_neu\tp_pos\n");
        for p in &self.predictions {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}",
                p.id, p.truth, p.predicted, p.probs[0], p.probs[1], p.probs[2]
            );
        }
        out
    }
}

/// Classifies every (preprocessed) record and tallies the results.
pub fn evaluate_model(ckpt: &Checkpoint, test: &[TweetRecord], vocab: &Vocab, max_len: usize) -> Result<EvalReport> {
    let labels: Vec<SentimentLabel> = test.iter().map(|r| r.require_label()).collect::<Result<_>>()?;
    let predictions: Vec<Prediction> = test
        .par_iter()
        .zip(labels)
        .map(|(r, truth)| {
            let ids = encode(&r.text, vocab, max_len).real_ids();
            let (pred, probs) = predict_ids(&ckpt.model, &ids)?;
            Ok(Prediction {
                id: r.id.clone(),
                truth,
                predicted: SentimentLabel::from_index(pred).expect("three classes"),
                probs,
            })
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport::from_predictions(predictions))
}

/// One dataset row of accuracies, aligned with the table columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultsRow {
    pub dataset: String,
    pub scores: Vec<f64>,
}

/// TSV with a `dataset` column followed by one column per experiment. Scores
/// use 3 decimals; every cell equal to the row maximum (after rounding) gets a
/// trailing `*`.
pub fn results_table(columns: &[&str], rows: &[ResultsRow]) -> Result<String> {
    for (i, c) in columns.iter().enumerate() {
        if columns[..i].contains(c) {
            return Err(Error::Invalid(format!("duplicate experiment name '{c}'")));
        }
    }
    let mut out = String::from("dataset");
    for c in columns {
        let _ = write!(out, "\t{c}");
    }
    out.push('\n');
    for row in rows {
        if row.scores.len() != columns.len() {
            return Err(Error::Invalid(format!(
                "row '{}' has {} scores for {} columns",
                row.dataset,
                row.scores.len(),
                columns.len()
            )));
        }
        let cells: Vec<String> = row.scores.iter().map(|s| format!("{s:.3}")).collect();
        let rounded: Vec<f64> = cells.iter().map(|c| c.parse().unwrap_or(f64::NAN)).collect();
        let best = rounded.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        out.push_str(&row.dataset);
        for (cell, r) in cells.iter().zip(&rounded) {
            let star = if *r == best { "*" } else { "" };
            let _ = write!(out, "\t{cell}{star}");
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use proptest::prelude::*;
    use SentimentLabel::*;

    fn pred(truth: SentimentLabel, predicted: SentimentLabel) -> Prediction {
        Prediction {
            id: "x".into(),
            truth,
            predicted,
            probs: [0.2, 0.3, 0.5],
        }
    }

    #[test]
    fn counting() {
        let r = EvalReport::from_predictions(vec![pred(Positive, Positive), pred(Negative, Negative), pred(Neutral, Positive)]);
        assert!((r.accuracy - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.confusion[1][2], 1);
        let perfect = EvalReport::from_predictions(vec![pred(Positive, Positive), pred(Neutral, Neutral)]);
        assert_eq!(perfect.accuracy, 1.0);
        assert_eq!(perfect.confusion, [[0, 0, 0], [0, 1, 0], [0, 0, 1]]);
    }

    #[test]
    fn ties_go_to_lowest_class() {
        assert_eq!(argmax(&[0.4, 0.4, 0.2]), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn zero_classifier_predicts_class_zero() {
        let vocab = Vocab::from_tokens(["a", "b"]).unwrap();
        let mut ckpt = init_model(&ModelConfig::desk(vocab.len()).with_hidden(8), 1).unwrap();
        ckpt.model.tensor_mut("classifier.weight").unwrap().data.fill(0.0);
        let test = vec![
            TweetRecord::new("1", "a", Some(Negative)),
            TweetRecord::new("2", "b", Some(Positive)),
            TweetRecord::new("3", "a b", Some(Negative)),
            TweetRecord::new("4", "b b", Some(Neutral)),
        ];
        let r = evaluate_model(&ckpt, &test, &vocab, 16).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert!(r.predictions.iter().all(|p| p.predicted == Negative));
        let unlabeled = vec![TweetRecord::new("5", "a", None)];
        assert!(evaluate_model(&ckpt, &unlabeled, &vocab, 16).is_err());
    }

    #[test]
    fn gold_row_stars_pre() {
        let rows = [ResultsRow {
            dataset: "Gold".into(),
            scores: vec![0.678, 0.756, 0.754],
        }];
        let t = results_table(&["Base", "Pre", "Pre+Emo"], &rows).unwrap();
        assert_eq!(t, "dataset\tBase\tPre\tPre+Emo\nGold\t0.678\t0.756*\t0.754\n");
    }

    #[test]
    fn star_rules() {
        let one = results_table(&["Only"], &[ResultsRow { dataset: "d".into(), scores: vec![0.5] }]).unwrap();
        assert!(one.ends_with("d\t0.500*\n"));
        let tie = results_table(
            &["A", "B", "C"],
            &[ResultsRow { dataset: "d".into(), scores: vec![0.7, 0.7, 0.1] }],
        )
        .unwrap();
        assert!(tie.ends_with("d\t0.700*\t0.700*\t0.100\n"));
        assert!(results_table(&["A", "A"], &[]).is_err());
    }

    #[test]
    fn prediction_tsv_layout() {
        let r = EvalReport::from_predictions(vec![pred(Negative, Neutral)]);
        assert_eq!(
            r.predictions_tsv(),
            "id\ttrue\tpred\tp_neg\tp_neu\tp_pos\nx\tnegative\tneutral\t0.200000\t0.300000\t0.500000\n"
        );
    }

    proptest! {
        #[test]
        fn confusion_rows_count_true_labels(pairs in prop::collection::vec((0usize..3, 0usize..3), 0..200)) {
            let preds: Vec<Prediction> = pairs
                .iter()
                .map(|&(t, p)| pred(SentimentLabel::from_index(t).unwrap(), SentimentLabel::from_index(p).unwrap()))
                .collect();
            let r = EvalReport::from_predictions(preds);
            for k in 0..3 {
                let truth = pairs.iter().filter(|&&(t, _)| t == k).count();
                prop_assert_eq!(r.confusion[k].iter().sum::<usize>(), truth);
            }
            let total: usize = r.confusion.iter().flatten().sum();
            prop_assert_eq!(total, pairs.len());
            if !pairs.is_empty() {
                let diag: usize = (0..3).map(|i| r.confusion[i][i]).sum();
                prop_assert!((r.accuracy - diag as f64 / total as f64).abs() < 1e-12);
            }
        }
    }
}
