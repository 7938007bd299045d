//! Bundled prompt templates and their renderer.
//!
//! Placeholders are written `{name}`. Rendering substitutes every placeholder
//! and touches nothing else; an unbound placeholder is an error.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::router::SubTaskKind;

const INF_MAIN: &str = include_str!("../../templates/inf_main.txt");
const INF_CLS: &str = include_str!("../../templates/inf_cls.txt");
const INF_SUB: &str = include_str!("../../templates/inf_sub.txt");
const MULTICHOICE: &str = include_str!("../../templates/multichoice.txt");

const OPTION_A: &str = include_str!("../../templates/options/a.txt");
const OPTION_B: &str = include_str!("../../templates/options/b.txt");
const OPTION_C: &str = include_str!("../../templates/options/c.txt");
const OPTION_D: &str = include_str!("../../templates/options/d.txt");
const OPTION_E: &str = include_str!("../../templates/options/e.txt");

pub const TEMPLATE_NAMES: [&str; 4] = ["inf_main", "inf_cls", "inf_sub", "multichoice"];

/// Placeholder used by the classifier and sub-task templates.
pub const DESCRIPTION_SLOT: &str = "Sub-task description";

pub type Vars = BTreeMap<String, String>;

pub fn vars<K: AsRef<str>, V: AsRef<str>>(pairs: &[(K, V)]) -> Vars {
    pairs
        .iter()
        .map(|(k, v)| (k.as_ref().to_owned(), v.as_ref().to_owned()))
        .collect()
}

pub fn template_source(name: &str) -> Result<&'static str> {
    match name {
        "inf_main" => Ok(INF_MAIN),
        "inf_cls" => Ok(INF_CLS),
        "inf_sub" => Ok(INF_SUB),
        "multichoice" => Ok(MULTICHOICE),
        other => Err(Error::UnknownTemplate(other.to_owned())),
    }
}

/// Option text for a kind, without its closing period.
pub fn option_description(kind: SubTaskKind) -> &'static str {
    match kind {
        SubTaskKind::QueryRewrite => OPTION_A,
        SubTaskKind::ApiCall => OPTION_B,
        SubTaskKind::ChatSummary => OPTION_C,
        SubTaskKind::Math => OPTION_D,
        SubTaskKind::None => OPTION_E,
    }
}

pub fn render_template(name: &str, vars: &Vars) -> Result<String> {
    let source = template_source(name)?;
    if name == "inf_main" {
        return render_main(source, vars);
    }
    substitute(source, vars)
}

fn substitute(source: &str, vars: &Vars) -> Result<String> {
    let mut out = String::with_capacity(source.len());
    let mut rest = source;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open + 1..];
        match tail.find(['}', '{', '\n']) {
            Some(close) if tail.as_bytes()[close] == b'}' && close > 0 => {
                let key = &tail[..close];
                let value = vars.get(key).ok_or_else(|| Error::Template(key.to_owned()))?;
                out.push_str(value);
                rest = &tail[close + 1..];
            }
            _ => {
                out.push('{');
                rest = tail;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// The main-task template takes `question_1..question_n` and
/// `answer_1..answer_{n-1}`: one block per past turn, then the open question.
fn render_main(source: &str, vars: &Vars) -> Result<String> {
    let (header, blocks) = source
        .split_once("\n\n")
        .expect("inf_main template has a header and a block pattern");
    let mut lines = blocks.lines();
    let question_line = lines.next().unwrap_or_default();
    let answer_line = lines.next().unwrap_or_default();

    let n = (1..)
        .take_while(|i| vars.contains_key(&format!("question_{i}")))
        .count();
    if n == 0 {
        return Err(Error::Template("question_1".into()));
    }
    let mut out = format!("{header}\n\n");
    for i in 1..=n {
        out.push_str(&block(question_line, i, "question", vars)?);
        out.push('\n');
        if i < n {
            out.push_str(&block(answer_line, i, "answer", vars)?);
            out.push('\n');
        }
    }
    Ok(out)
}

fn block(pattern: &str, i: usize, field: &str, vars: &Vars) -> Result<String> {
    let key = format!("{field}_{i}");
    let value = vars.get(&key).ok_or_else(|| Error::Template(key.clone()))?;
    let local = self::vars(&[("i".to_owned(), i.to_string()), (format!("{field}_i"), value.clone())]);
    substitute(pattern, &local)
}

pub fn classifier_instruction(kind: SubTaskKind) -> String {
    render_template("inf_cls", &vars(&[(DESCRIPTION_SLOT, option_description(kind))]))
        .expect("inf_cls has a single slot")
}

pub fn subtask_instruction(kind: SubTaskKind) -> String {
    render_template("inf_sub", &vars(&[(DESCRIPTION_SLOT, option_description(kind))]))
        .expect("inf_sub has a single slot")
}

pub fn multichoice_instruction() -> String {
    let opts: Vec<(String, &str)> = SubTaskKind::ALL
        .iter()
        .map(|&k| {
            let key = format!("option_{}", k.option_letter().to_ascii_lowercase());
            (key, option_description(k))
        })
        .collect();
    render_template("multichoice", &vars(&opts)).expect("all five options bound")
}

/// Instruction header of the main-task template.
pub fn main_instruction() -> String {
    INF_MAIN.split_once("\n\n").map(|(h, _)| h.to_owned()).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cls_contains_answer_format_line() {
        let text = classifier_instruction(SubTaskKind::Math);
        assert!(text.contains("i.e. \"#Answer: [\"Yes\" or \"No\"]\" \n"));
        assert!(text.ends_with("mathematical computation."));
    }

    #[test]
    fn sub_with_empty_description() {
        let text = render_template("inf_sub", &vars(&[(DESCRIPTION_SLOT, "")])).unwrap();
        assert!(text.ends_with("Sub-task: \n."));
    }

    #[test]
    fn unbound_placeholder_is_named() {
        let err = render_template("inf_cls", &Vars::new()).unwrap_err();
        assert!(matches!(err, Error::Template(ref k) if k == DESCRIPTION_SLOT));
        assert!(matches!(
            render_template("nope", &Vars::new()),
            Err(Error::UnknownTemplate(_))
        ));
    }

    #[test]
    fn main_blocks() {
        let v = vars(&[
            ("question_1", "hi"),
            ("answer_1", "hello"),
            ("question_2", "how big is it?"),
        ]);
        let text = render_template("inf_main", &v).unwrap();
        assert_eq!(text.matches("#question").count(), 2);
        assert_eq!(text.matches("#answer").count(), 1);
        assert!(text.ends_with("#answer1: hello\n#question2: how big is it?\n"));
        assert!(text.starts_with(&main_instruction()));

        let missing = vars(&[("question_1", "a"), ("question_2", "b")]);
        assert!(matches!(
            render_template("inf_main", &missing),
            Err(Error::Template(ref k)) if k == "answer_1"
        ));
    }

    #[test]
    fn multichoice_lists_every_option() {
        let text = multichoice_instruction();
        for letter in ['A', 'B', 'C', 'D', 'E'] {
            assert!(text.contains(&format!("\n({letter}) ")));
        }
        assert!(!text.contains("{option"));
    }

    #[test]
    fn rendering_is_byte_stable() {
        assert_eq!(classifier_instruction(SubTaskKind::ApiCall), classifier_instruction(SubTaskKind::ApiCall));
        assert_ne!(classifier_instruction(SubTaskKind::ApiCall), classifier_instruction(SubTaskKind::Math));
    }
}
