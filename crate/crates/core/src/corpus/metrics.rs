//! Evaluation metrics over whitespace tokens.
//!
//! Label predictions are compared to options case-insensitively after
//! trimming. ROUGE-L is the sentence-level LCS F-measure with equal weight on
//! precision and recall.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    F1,
    RougeL,
    ExactMatch,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "accuracy" | "acc" => Ok(Metric::Accuracy),
            "f1" => Ok(Metric::F1),
            "rouge_l" | "rougel" => Ok(Metric::RougeL),
            "exact_match" | "em" => Ok(Metric::ExactMatch),
            other => Err(Error::Config(format!("unknown metric {other:?}"))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Accuracy => "accuracy",
            Metric::F1 => "f1",
            Metric::RougeL => "rouge_l",
            Metric::ExactMatch => "exact_match",
        })
    }
}

fn tokens(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// 1.0 when the trimmed strings are identical.
pub fn exact_match(prediction: &str, reference: &str) -> f64 {
    f64::from(u8::from(prediction.trim() == reference.trim()))
}

/// 1.0 when the prediction verbalizes the reference label.
pub fn label_match(prediction: &str, reference: &str) -> f64 {
    f64::from(u8::from(
        prediction.trim().to_lowercase() == reference.trim().to_lowercase(),
    ))
}

pub fn accuracy<S: AsRef<str>>(predictions: &[S], references: &[S]) -> f64 {
    assert_eq!(predictions.len(), references.len());
    if predictions.is_empty() {
        return 0.0;
    }
    let hits: f64 = predictions
        .iter()
        .zip(references)
        .map(|(p, r)| label_match(p.as_ref(), r.as_ref()))
        .sum();
    hits / predictions.len() as f64
}

/// Counts of a binary confusion matrix for one positive label.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl BinaryCounts {
    pub fn add(&mut self, prediction: &str, reference: &str, positive: &str) {
        let p = label_match(prediction, positive) == 1.0;
        let r = label_match(reference, positive) == 1.0;
        match (p, r) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    /// F1 of the positive class. With no positive predictions and no positive
    /// references the classifier made no mistake on that class and scores 1.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

pub fn binary_f1<S: AsRef<str>>(predictions: &[S], references: &[S], positive: &str) -> f64 {
    assert_eq!(predictions.len(), references.len());
    let mut counts = BinaryCounts::default();
    for (p, r) in predictions.iter().zip(references) {
        counts.add(p.as_ref(), r.as_ref(), positive);
    }
    counts.f1()
}

/// The label treated as positive for F1: a yes/positive/true option when one
/// exists, otherwise the last option.
pub fn positive_label(options: &[String]) -> Option<&str> {
    options
        .iter()
        .find(|o| matches!(o.trim().to_lowercase().as_str(), "yes" | "positive" | "true"))
        .or_else(|| options.last())
        .map(String::as_str)
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(prediction: &str, reference: &str) -> f64 {
    let p = tokens(prediction);
    let r = tokens(reference);
    let lcs = lcs_len(&p, &r);
    if lcs == 0 {
        return 0.0;
    }
    // 2PR / (P + R) with P = lcs/|p| and R = lcs/|r|, in one division.
    2.0 * lcs as f64 / (p.len() + r.len()) as f64
}

/// Scores one prediction. `options` supplies the positive label for F1.
pub fn compute_metric(metric: Metric, prediction: &str, reference: &str, options: Option<&[String]>) -> Result<f64> {
    Ok(match metric {
        Metric::Accuracy => label_match(prediction, reference),
        Metric::ExactMatch => exact_match(prediction, reference),
        Metric::RougeL => rouge_l(prediction, reference),
        Metric::F1 => {
            let positive = options
                .and_then(positive_label)
                .ok_or_else(|| Error::Config("F1 needs an option set to pick the positive label".into()))?;
            let mut counts = BinaryCounts::default();
            counts.add(prediction, reference, positive);
            counts.f1()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_match_identity() {
        assert_eq!(exact_match("Paris", "Paris"), 1.0);
        assert_eq!(exact_match(" Paris\n", "Paris"), 1.0);
        assert_eq!(exact_match("paris", "Paris"), 0.0);
    }

    #[test]
    fn rouge_l_hand_value() {
        // LCS("a c", "a b c") = 2, P = 1, R = 2/3, F = 2 * (2/3) / (5/3) = 0.8
        assert!((rouge_l("a c", "a b c") - 0.8).abs() < 1e-12);
    }

    #[test]
    fn binary_f1_hand_value() {
        // tp = 1, fp = 1, fn = 0: P = 1/2, R = 1, F1 = 2/3
        let preds = ["Yes", "Yes", "No"];
        let refs = ["Yes", "No", "No"];
        assert!((binary_f1(&preds, &refs, "Yes") - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_metric_is_a_config_error() {
        assert!(matches!("bleu".parse::<Metric>(), Err(Error::Config(_))));
        assert_eq!("rouge-l".parse::<Metric>().unwrap(), Metric::RougeL);
    }

    #[test]
    fn label_matching_ignores_case_and_whitespace() {
        assert_eq!(compute_metric(Metric::Accuracy, "  yes ", "Yes", None).unwrap(), 1.0);
    }

    #[test]
    fn positive_label_prefers_yes() {
        let opts = vec!["Yes".to_string(), "No".to_string()];
        assert_eq!(positive_label(&opts), Some("Yes"));
        let opts = vec!["A".to_string(), "B".to_string()];
        assert_eq!(positive_label(&opts), Some("B"));
    }

    #[test]
    fn disjoint_rouge_is_zero() {
        assert_eq!(rouge_l("x y", "a b"), 0.0);
        assert_eq!(rouge_l("", "a b"), 0.0);
    }

    proptest! {
        #[test]
        fn rouge_of_self_is_one(words in proptest::collection::vec("[a-z]{1,5}", 1..12)) {
            let s = words.join(" ");
            prop_assert!((rouge_l(&s, &s) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn rouge_is_bounded(a in "[a-c ]{0,20}", b in "[a-c ]{0,20}") {
            let v = rouge_l(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn accuracy_is_mean_of_label_matches(pairs in proptest::collection::vec((0u8..3, 0u8..3), 1..30)) {
            let labels = ["No", "Yes", "Maybe"];
            let preds: Vec<&str> = pairs.iter().map(|p| labels[p.0 as usize]).collect();
            let refs: Vec<&str> = pairs.iter().map(|p| labels[p.1 as usize]).collect();
            let mean = preds.iter().zip(&refs).map(|(p, r)| exact_match(p, r)).sum::<f64>() / preds.len() as f64;
            prop_assert!((accuracy(&preds, &refs) - mean).abs() < 1e-12);
        }
    }
}
