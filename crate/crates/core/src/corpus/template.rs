use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::Example;
use crate::error::{Error, Result};

/// Slot names that resolve to the example's target.
const ANSWER_SLOTS: [&str; 3] = ["answer", "label", "target"];

/// How one example is rendered to text.
///
/// Slots are written `{Name}`. `{answer}`, `{label}` and `{target}` (any case)
/// resolve to the target, `{input}` and `{sentence}` to the input when the
/// metadata has no entry of that exact name, and every other slot to the
/// metadata entry of the same name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTemplate {
    pub input_pattern: String,
    pub answer_pattern: String,
    #[serde(default = "default_separator")]
    pub demo_separator: String,
}

fn default_separator() -> String {
    "\n\n".to_owned()
}

#[derive(Debug, PartialEq)]
enum Piece<'a> {
    Text(&'a str),
    Slot(&'a str),
}

fn parse_pattern(pattern: &str) -> Vec<Piece<'_>> {
    let mut pieces = Vec::new();
    let mut rest = pattern;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let close = after.find('}');
        let name_ok = close.is_some_and(|c| {
            c > 0 && after[..c].chars().all(|ch| ch.is_alphanumeric() || ch == '_')
        });
        if name_ok {
            let c = close.unwrap();
            if open > 0 {
                pieces.push(Piece::Text(&rest[..open]));
            }
            pieces.push(Piece::Slot(&after[..c]));
            rest = &after[c + 1..];
        } else {
            pieces.push(Piece::Text(&rest[..open + 1]));
            rest = after;
        }
    }
    if !rest.is_empty() {
        pieces.push(Piece::Text(rest));
    }
    pieces
}

fn is_answer_slot(name: &str) -> bool {
    ANSWER_SLOTS.iter().any(|s| s.eq_ignore_ascii_case(name))
}

fn resolve<'e>(slot: &str, example: &'e Example) -> Result<&'e str> {
    if is_answer_slot(slot) {
        return Ok(&example.target);
    }
    if let Some(v) = example.metadata.get(slot) {
        return Ok(v);
    }
    if slot.eq_ignore_ascii_case("input") || slot.eq_ignore_ascii_case("sentence") {
        return Ok(&example.input);
    }
    Err(Error::Render {
        slot: slot.to_owned(),
    })
}

fn fill(pieces: &[Piece<'_>], example: &Example, out: &mut String) -> Result<()> {
    for piece in pieces {
        match piece {
            Piece::Text(t) => out.push_str(t),
            Piece::Slot(name) => out.push_str(resolve(name, example)?),
        }
    }
    Ok(())
}

impl TaskTemplate {
    pub fn new(
        input_pattern: impl Into<String>,
        answer_pattern: impl Into<String>,
        demo_separator: impl Into<String>,
    ) -> Self {
        TaskTemplate {
            input_pattern: input_pattern.into(),
            answer_pattern: answer_pattern.into(),
            demo_separator: demo_separator.into(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let t: TaskTemplate = toml::from_str(text)?;
        t.check()?;
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("template serializes")
    }

    /// The answer pattern must contain exactly one answer slot.
    pub fn check(&self) -> Result<()> {
        let n = parse_pattern(&self.answer_pattern)
            .iter()
            .filter(|p| matches!(p, Piece::Slot(s) if is_answer_slot(s)))
            .count();
        if n != 1 {
            return Err(Error::Config(format!(
                "answer pattern {:?} must contain exactly one answer slot, found {n}",
                self.answer_pattern
            )));
        }
        Ok(())
    }

    /// Text of the answer pattern that precedes the answer slot.
    fn answer_prefix(&self) -> Vec<Piece<'_>> {
        parse_pattern(&self.answer_pattern)
            .into_iter()
            .take_while(|p| !matches!(p, Piece::Slot(s) if is_answer_slot(s)))
            .collect()
    }
}

/// Renders one example. Without the target, the text stops right where the
/// answer would begin, so `render(.., false) + target == render(.., true)`
/// whenever the answer pattern ends in its answer slot.
pub fn render_example(template: &TaskTemplate, example: &Example, include_target: bool) -> Result<String> {
    template.check()?;
    let mut out = String::new();
    fill(&parse_pattern(&template.input_pattern), example, &mut out)?;
    if include_target {
        fill(&parse_pattern(&template.answer_pattern), example, &mut out)?;
    } else {
        fill(&template.answer_prefix(), example, &mut out)?;
    }
    Ok(out)
}

/// Demonstrations (with targets) in the given order, then the query without its target.
pub fn assemble_prompt(demos: &[&Example], query: &Example, template: &TaskTemplate) -> Result<String> {
    let mut out = String::new();
    for demo in demos {
        out.push_str(&render_example(template, demo, true)?);
        out.push_str(&template.demo_separator);
    }
    out.push_str(&render_example(template, query, false)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::templates;

    fn review(id: &str, text: &str, label: &str) -> Example {
        Example::new(id, text, label)
            .with_options(["Negative", "Positive"])
            .with_meta("Sentence", text)
    }

    #[test]
    fn sst2_row_renders_verbatim() {
        let t = templates::sst2();
        let ex = review("1", "a gripping, funny film", "Positive");
        let text = render_example(&t, &ex, true).unwrap();
        assert_eq!(
            text,
            "Review: \"a gripping, funny film\" Is this movie review sentence negative or positive? Positive"
        );
        let without = render_example(&t, &ex, false).unwrap();
        assert_eq!(format!("{without}{}", ex.target), text);
    }

    #[test]
    fn missing_slot_is_named() {
        let t = TaskTemplate::new("{Foo} says", " {answer}", "\n");
        let err = render_example(&t, &Example::new("1", "x", "y"), true).unwrap_err();
        assert_eq!(err.to_string(), "missing slot Foo");
    }

    #[test]
    fn braces_that_are_not_slots_stay_literal() {
        let t = TaskTemplate::new("set {a, b} {input}", "={answer}", "\n");
        let s = render_example(&t, &Example::new("1", "x", "y"), true).unwrap();
        assert_eq!(s, "set {a, b} x=y");
    }

    #[test]
    fn zero_shot_prompt_is_the_query_alone() {
        let t = TaskTemplate::new("Q: {input}", "\nA: {answer}", "\n\n");
        let q = Example::new("q", "what?", "that");
        assert_eq!(assemble_prompt(&[], &q, &t).unwrap(), "Q: what?\nA: ");
    }

    #[test]
    fn demo_order_is_preserved() {
        let t = TaskTemplate::new("{input}", "={answer}", "|");
        let d1 = Example::new("1", "a", "b");
        let d2 = Example::new("2", "c", "d");
        let q = Example::new("q", "e", "f");
        assert_eq!(assemble_prompt(&[&d1, &d2], &q, &t).unwrap(), "a=b|c=d|e=");
        assert_eq!(assemble_prompt(&[&d2, &d1], &q, &t).unwrap(), "c=d|a=b|e=");
    }

    #[test]
    fn eight_demos_make_eight_blocks() {
        let t = TaskTemplate::new("{input}", " {answer}", "\n\n");
        let demos: Vec<Example> = (0..8).map(|i| Example::new(i.to_string(), format!("x{i}"), "y")).collect();
        let refs: Vec<&Example> = demos.iter().collect();
        let q = Example::new("q", "xq", "y");
        let prompt = assemble_prompt(&refs, &q, &t).unwrap();
        let blocks: Vec<_> = prompt.split("\n\n").collect();
        assert_eq!(blocks.len(), 9);
        assert!(blocks[..8].iter().all(|b| b.ends_with(" y")));
    }

    #[test]
    fn template_toml_round_trip() {
        let t = templates::rte();
        assert_eq!(TaskTemplate::from_toml_str(&t.to_toml_string()).unwrap(), t);
    }

    #[test]
    fn answer_pattern_without_answer_slot_is_rejected() {
        let t = TaskTemplate::new("{input}", " done", "\n");
        assert!(matches!(t.check(), Err(Error::Config(_))));
    }
}
