//! Conversation scripts: the versioned JSON document, its validation, the
//! synthetic generator and the template registry.

mod synth;
pub mod templates;

pub use synth::{generate_synthetic, LengthRange, MixRatios, ProfileLengths, SyntheticProfile};

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ValidationIssue};
use crate::router::{Answer, PriorityOrder, SubTaskKind};

pub const SCRIPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptMeta {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnSpec {
    pub query: String,
    pub gold_subtask: SubTaskKind,
    #[serde(default)]
    pub scripted_verdicts: BTreeMap<SubTaskKind, Answer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scripted_multichoice: Option<char>,
    /// Side-path reasoning emitted before the sub-task output (math turns).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scripted_reasoning: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scripted_subtask_output: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scripted_retrieval: Option<String>,
    pub scripted_answer: String,
}

impl TurnSpec {
    pub fn verdict(&self, kind: SubTaskKind) -> Answer {
        self.scripted_verdicts.get(&kind).copied().unwrap_or(Answer::No)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConversationScript {
    pub version: u32,
    pub meta: ScriptMeta,
    pub main_instruction: String,
    pub subtask_instructions: BTreeMap<SubTaskKind, String>,
    pub classifier_instructions: BTreeMap<SubTaskKind, String>,
    pub multichoice_instruction: String,
    pub turns: Vec<TurnSpec>,
}

impl ConversationScript {
    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("script serializes");
        s.push('\n');
        s
    }

    pub fn turn(&self, t: u32) -> Option<&TurnSpec> {
        self.turns.get((t as usize).checked_sub(1)?)
    }

    pub fn turn_count(&self) -> u32 {
        self.turns.len() as u32
    }

    /// Every violated rule, in document order. Empty means valid.
    pub fn validate(&self) -> Vec<ValidationIssue> {
        let mut issues = Vec::new();
        let mut issue = |path: String, rule: &str| {
            issues.push(ValidationIssue {
                path,
                rule: rule.to_owned(),
            })
        };

        if self.version != SCRIPT_VERSION {
            issue("version".into(), "unsupported script version");
        }
        if self.meta.id.trim().is_empty() {
            issue("meta.id".into(), "must be nonempty");
        }
        for (field, map) in [
            ("subtask_instructions", &self.subtask_instructions),
            ("classifier_instructions", &self.classifier_instructions),
        ] {
            for kind in SubTaskKind::ACTIONABLE {
                if !map.contains_key(&kind) {
                    issue(format!("{field}.{kind}"), "missing instruction");
                }
            }
            if map.contains_key(&SubTaskKind::None) {
                issue(format!("{field}.none"), "none has no instruction");
            }
        }
        if self.turns.is_empty() {
            issue("turns".into(), "must contain at least one turn");
        }

        let order = PriorityOrder::default();
        for (i, turn) in self.turns.iter().enumerate() {
            let at = |field: &str| format!("turns[{i}].{field}");
            let gold = turn.gold_subtask;
            if turn.query.trim().is_empty() {
                issue(at("query"), "must be nonempty");
            }
            if turn.scripted_answer.trim().is_empty() {
                issue(at("scripted_answer"), "must be nonempty");
            }
            if gold == SubTaskKind::QueryRewrite && turn.scripted_retrieval.is_none() {
                issue(at("scripted_retrieval"), "required when gold_subtask is query_rewrite");
            }
            if gold.retains_output() && turn.scripted_subtask_output.is_none() {
                issue(at("scripted_subtask_output"), "required when gold_subtask is math or api_call");
            }
            if turn.scripted_verdicts.contains_key(&SubTaskKind::None) {
                issue(at("scripted_verdicts.none"), "none has no classifier");
            }
            if order.argmax(|k| turn.verdict(k).is_yes()) != gold {
                issue(at("scripted_verdicts"), "priority argmax disagrees with gold_subtask");
            }
            if let Some(letter) = turn.scripted_multichoice {
                match SubTaskKind::from_option_letter(letter) {
                    None => issue(at("scripted_multichoice"), "not an option letter A-E"),
                    Some(k) if k != gold => {
                        issue(at("scripted_multichoice"), "option disagrees with gold_subtask")
                    }
                    Some(_) => {}
                }
            }
        }
        issues
    }
}

/// Parses and validates a script file; every violation is reported at once.
pub fn load_and_validate(path: impl AsRef<Path>) -> Result<ConversationScript> {
    let text = std::fs::read_to_string(path)?;
    parse_and_validate(&text)
}

pub fn parse_and_validate(text: &str) -> Result<ConversationScript> {
    let script = ConversationScript::from_json_str(text)?;
    let issues = script.validate();
    if issues.is_empty() {
        Ok(script)
    } else {
        Err(Error::Validation(issues))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> ConversationScript {
        let instr: BTreeMap<_, _> = SubTaskKind::ACTIONABLE
            .iter()
            .map(|&k| (k, format!("decide {k}")))
            .collect();
        ConversationScript {
            version: 1,
            meta: ScriptMeta {
                id: "t".into(),
                seed: None,
                profile: None,
            },
            main_instruction: "answer the user".into(),
            subtask_instructions: instr.clone(),
            classifier_instructions: instr,
            multichoice_instruction: "pick one".into(),
            turns: vec![TurnSpec {
                query: "hi there".into(),
                gold_subtask: SubTaskKind::None,
                scripted_verdicts: BTreeMap::new(),
                scripted_multichoice: Some('E'),
                scripted_reasoning: None,
                scripted_subtask_output: None,
                scripted_retrieval: None,
                scripted_answer: "hello".into(),
            }],
        }
    }

    #[test]
    fn minimal_is_valid_and_round_trips() {
        let s = minimal();
        assert!(s.validate().is_empty());
        let back = parse_and_validate(&s.to_json_pretty()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn rewrite_without_retrieval_names_turn() {
        let mut s = minimal();
        s.turns[0].gold_subtask = SubTaskKind::QueryRewrite;
        s.turns[0].scripted_verdicts.insert(SubTaskKind::QueryRewrite, Answer::Yes);
        s.turns[0].scripted_multichoice = Some('A');
        let issues = s.validate();
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].path, "turns[0].scripted_retrieval");
    }

    #[test]
    fn collects_every_issue() {
        let mut s = minimal();
        s.classifier_instructions.remove(&SubTaskKind::Math);
        s.turns[0].scripted_verdicts.insert(SubTaskKind::ApiCall, Answer::Yes);
        s.turns[0].scripted_multichoice = Some('Z');
        let paths: Vec<_> = s.validate().into_iter().map(|i| i.path).collect();
        assert_eq!(
            paths,
            [
                "classifier_instructions.math",
                "turns[0].scripted_verdicts",
                "turns[0].scripted_multichoice"
            ]
        );
    }

    #[test]
    fn unknown_fields_rejected() {
        let mut v = serde_json::to_value(minimal()).unwrap();
        v["surprise"] = serde_json::json!(1);
        assert!(ConversationScript::from_json_str(&v.to_string()).is_err());
    }
}
