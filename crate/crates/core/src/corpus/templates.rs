//! Prompt templates for a handful of standard ICL benchmarks.
//!
//! Each input pattern is followed by a space and the answer. Demonstrations
//! are separated by a blank line.

use super::dataset::TaskKind;
use super::metrics::Metric;
use super::template::TaskTemplate;

fn t(input: &str) -> TaskTemplate {
    TaskTemplate::new(input, " {answer}", "\n\n")
}

pub fn sst2() -> TaskTemplate {
    t("Review: \"{Sentence}\" Is this movie review sentence negative or positive?")
}

pub fn agnews() -> TaskTemplate {
    t("\"{Sentence}\" What is this text about? World, Sports, Business, or Technology?")
}

pub fn boolq() -> TaskTemplate {
    t("{Sentence1} Can we conclude that {Sentence2}?")
}

pub fn rte() -> TaskTemplate {
    t("{Sentence1} Based on the paragraph above can we conclude that \"{Sentence2}\"? Yes or No?")
}

pub fn snli() -> TaskTemplate {
    t("If \"{Sentence1}\", does this mean that \"{Sentence2}\"? Yes, No, or Maybe?")
}

pub fn paws() -> TaskTemplate {
    t("{Sentence1} {Sentence2} Do these sentences mean the same thing?")
}

pub fn multirc() -> TaskTemplate {
    t("{Sentence1} Question: \"{Sentence2}\" Response: \"{Sentence3}\" Does the response correctly answer the question?")
}

pub fn copa() -> TaskTemplate {
    t("\"{Sentence1}\" What is the {Sentence2}?")
}

pub fn hellaswag() -> TaskTemplate {
    t("What happens next in this paragraph? {Sentence}")
}

pub fn commongen() -> TaskTemplate {
    t("Concepts: {Sentence}. Write a sentence that includes all these words.")
}

pub fn gigaword() -> TaskTemplate {
    t("Write a short summary for this text: {Sentence}")
}

pub fn squad() -> TaskTemplate {
    t("Please answer a question about the following article about {Sentence}: {Sentence1} {Sentence2}")
}

/// Looks up a bundled task by name: template, kind, metric and label set.
pub fn builtin(name: &str) -> Option<(TaskTemplate, TaskKind, Metric, Option<Vec<&'static str>>)> {
    use Metric::*;
    use TaskKind::*;
    let row = match name.to_ascii_lowercase().as_str() {
        "sst2" => (sst2(), Classification, Accuracy, Some(vec!["Negative", "Positive"])),
        "agnews" => (
            agnews(),
            Classification,
            Accuracy,
            Some(vec!["World", "Sports", "Business", "Technology"]),
        ),
        "boolq" => (boolq(), Classification, Accuracy, Some(vec!["No", "Yes"])),
        "rte" => (rte(), Classification, Accuracy, Some(vec!["Yes", "No"])),
        "snli" => (snli(), Classification, Accuracy, Some(vec!["Yes", "Maybe", "No"])),
        "paws" => (paws(), Classification, Accuracy, Some(vec!["No", "Yes"])),
        "multirc" => (multirc(), Classification, F1, Some(vec!["No", "Yes"])),
        "copa" => (copa(), MultiChoice, Accuracy, Some(vec!["A", "B"])),
        "hellaswag" => (hellaswag(), MultiChoice, Accuracy, Some(vec!["A", "B", "C", "D"])),
        "commongen" => (commongen(), Generation, RougeL, None),
        "gigaword" => (gigaword(), Generation, RougeL, None),
        "squad" => (squad(), Generation, ExactMatch, None),
        _ => return None,
    };
    Some(row)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_builtin_is_consistent() {
        for name in [
            "sst2", "agnews", "boolq", "rte", "snli", "paws", "multirc", "copa", "hellaswag", "commongen",
            "gigaword", "squad",
        ] {
            let (tpl, kind, metric, labels) = builtin(name).unwrap();
            tpl.check().unwrap();
            assert!(kind.allows_metric(metric), "{name}");
            assert_eq!(labels.is_some(), kind.requires_options(), "{name}");
        }
        assert!(builtin("nope").is_none());
    }
}
