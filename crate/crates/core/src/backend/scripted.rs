use std::collections::BTreeMap;

use crate::backend::DecodeStage;
use crate::router::{Answer, SubTaskKind};
use crate::script::ConversationScript;

/// Outputs a scripted model emits, keyed by (turn, stage).
///
/// Built from a script, every stage the orchestrator can reach gets an entry:
/// classifier verdicts default to "No", the multi-choice letter defaults to
/// the gold label's option, and reasoning and sub-task output default to empty.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScriptedBehavior {
    entries: BTreeMap<(u32, DecodeStage), String>,
}

impl ScriptedBehavior {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_script(script: &ConversationScript) -> Self {
        let mut b = Self::new();
        for (i, turn) in script.turns.iter().enumerate() {
            let t = i as u32 + 1;
            for kind in SubTaskKind::ACTIONABLE {
                let answer = turn.scripted_verdicts.get(&kind).copied().unwrap_or(Answer::No);
                b.insert(t, DecodeStage::Classify(kind), answer.as_output());
            }
            let letter = turn
                .scripted_multichoice
                .unwrap_or_else(|| turn.gold_subtask.option_letter());
            b.insert(t, DecodeStage::MultiChoice, format!("({letter})"));
            b.insert(
                t,
                DecodeStage::SubtaskReasoning,
                turn.scripted_reasoning.clone().unwrap_or_default(),
            );
            b.insert(
                t,
                DecodeStage::SubtaskOutput,
                turn.scripted_subtask_output.clone().unwrap_or_default(),
            );
            b.insert(t, DecodeStage::Answer, turn.scripted_answer.clone());
        }
        b
    }

    pub fn insert(&mut self, turn: u32, stage: DecodeStage, text: impl Into<String>) {
        self.entries.insert((turn, stage), text.into());
    }

    pub fn lookup(&self, turn: u32, stage: DecodeStage) -> Option<&str> {
        self.entries.get(&(turn, stage)).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
