//! Task metrics on single pairs and on batches.

use genicl::corpus::metrics::{accuracy, binary_f1, rouge_l};
use genicl::corpus::{compute_metric, Metric};

fn main() -> genicl::Result<()> {
    println!("rouge_l(\"a c\", \"a b c\") = {}", rouge_l("a c", "a b c"));
    println!("exact match is trimmed, not case folded: {} {}", compute_metric(Metric::ExactMatch, " paris ", "paris", None)?, compute_metric(Metric::ExactMatch, "Paris", "paris", None)?);
    let opts = ["positive".to_string(), "negative".to_string()];
    println!("label match: {}", compute_metric(Metric::Accuracy, "negative", "negative", Some(&opts))?);
    let pred = ["yes", "yes", "no", "no", "yes"];
    let gold = ["yes", "no", "yes", "no", "yes"];
    println!("accuracy {:.3}, F1(yes) {:.3}", accuracy(&pred, &gold), binary_f1(&pred, &gold, "yes"));
    Ok(())
}
