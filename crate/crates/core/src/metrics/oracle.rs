//! Naive replay: rebuild the text each stage would prefill and count it.
//! Shares no code path with the engine's caches or router.

use serde::{Deserialize, Serialize};

use super::{Stage, StageCost, TurnMetrics};
use crate::orchestrator::{ClassificationMode, Strategy, StrategyConfig};
use crate::cache::RetentionMode;
use crate::router::SubTaskKind;
use crate::script::{ConversationScript, TurnSpec};
use crate::tokenizer::Tokenizer;

fn letter_kind(letter: char) -> SubTaskKind {
    match letter {
        'A' | 'a' => SubTaskKind::QueryRewrite,
        'B' | 'b' => SubTaskKind::ApiCall,
        'C' | 'c' => SubTaskKind::ChatSummary,
        'D' | 'd' => SubTaskKind::Math,
        _ => SubTaskKind::None,
    }
}

fn kind_letter(kind: SubTaskKind) -> char {
    match kind {
        SubTaskKind::QueryRewrite => 'A',
        SubTaskKind::ApiCall => 'B',
        SubTaskKind::ChatSummary => 'C',
        SubTaskKind::Math => 'D',
        SubTaskKind::None => 'E',
    }
}

fn says_yes(turn: &TurnSpec, kind: SubTaskKind) -> bool {
    turn.scripted_verdicts
        .get(&kind)
        .is_some_and(|a| a.as_output() == "Yes")
}

struct Plan {
    selected: SubTaskKind,
    /// (instruction text, verdict text) per classifier call.
    calls: Vec<(String, String)>,
}

fn plan(script: &ConversationScript, cfg: &StrategyConfig, turn: &TurnSpec) -> Plan {
    let verdict = |k| if says_yes(turn, k) { "Yes" } else { "No" }.to_string();
    let instr = |k: SubTaskKind| script.classifier_instructions[&k].clone();
    match cfg.classification_mode {
        ClassificationMode::Multichoice => {
            let letter = turn
                .scripted_multichoice
                .unwrap_or_else(|| kind_letter(turn.gold_subtask));
            Plan {
                selected: letter_kind(letter),
                calls: vec![(script.multichoice_instruction.clone(), format!("({letter})"))],
            }
        }
        ClassificationMode::Hierarchical => {
            let mut calls = Vec::new();
            let mut selected = SubTaskKind::None;
            for &k in cfg.priority.kinds() {
                calls.push((instr(k), verdict(k)));
                if says_yes(turn, k) {
                    selected = k;
                    break;
                }
            }
            Plan { selected, calls }
        }
        ClassificationMode::Batched => {
            let kinds = cfg.priority.kinds();
            let selected = kinds
                .iter()
                .copied()
                .find(|&k| says_yes(turn, k))
                .unwrap_or(SubTaskKind::None);
            Plan {
                selected,
                calls: kinds.iter().map(|&k| (instr(k), verdict(k))).collect(),
            }
        }
    }
}

/// Expected per-turn metrics for running `script` under `cfg`.
pub fn oracle_counts(
    script: &ConversationScript,
    cfg: &StrategyConfig,
    tokenizer: Tokenizer,
) -> Vec<TurnMetrics> {
    let n = |s: &str| tokenizer.count(s);
    let turns = &script.turns;
    let batched = cfg.classification_mode == ClassificationMode::Batched;
    // history pieces of completed turns: query, kept retrieval, answer
    let mut past: Vec<Vec<String>> = Vec::new();
    let mut out = Vec::new();

    for (i, turn) in turns.iter().enumerate() {
        let t = i as u32 + 1;
        let p = plan(script, cfg, turn);
        let sel = p.selected;
        let retrieval = match (sel, &turn.scripted_retrieval) {
            (SubTaskKind::QueryRewrite, Some(r)) => Some(r.clone()),
            _ => None,
        };
        let output = turn.scripted_subtask_output.clone().unwrap_or_default();
        let reasoning = turn.scripted_reasoning.clone().unwrap_or_default();
        let keeps_output = matches!(sel, SubTaskKind::Math | SubTaskKind::ApiCall);

        let mut m = TurnMetrics::new(t, batched);
        let reload = matches!(cfg.strategy, Strategy::FullReload | Strategy::RecentReload);

        // full text of the main context a re-load stage starts from
        let context = if reload {
            let first = match cfg.strategy {
                Strategy::RecentReload => i.saturating_sub(cfg.recent_window),
                _ => 0,
            };
            let mut text = vec![script.main_instruction.clone()];
            for pieces in &past[first..] {
                text.extend(pieces.iter().cloned());
            }
            text.push(turn.query.clone());
            text.iter().map(|s| n(s)).sum()
        } else {
            0
        };

        for (instruction, verdict) in &p.calls {
            m.record_classifier(StageCost::new(context + n(instruction), n(verdict)));
        }

        if sel != SubTaskKind::None {
            let instruction = &script.subtask_instructions[&sel];
            let mut prefill = context + n(instruction);
            if cfg.strategy == Strategy::Ciflex
                && cfg.retention_mode == RetentionMode::Recompute
                && keeps_output
            {
                prefill += n(&output);
            }
            m.subtask = StageCost::new(prefill, n(&reasoning) + n(&output));
        }

        let mut main = retrieval.as_deref().map_or(0, n);
        if reload {
            main += context;
            if keeps_output {
                main += n(&output);
            }
        } else if t == 1 {
            main += n(&script.main_instruction) + n(&turn.query);
        }
        m.main_answer = StageCost::new(main, n(&turn.scripted_answer));

        if !reload {
            m.turn_update.prefill = turns.get(i + 1).map_or(0, |next| n(&next.query));
        }

        let mut pieces = vec![turn.query.clone()];
        pieces.extend(retrieval);
        pieces.push(turn.scripted_answer.clone());
        past.push(pieces);
        out.push(m);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum OracleVerdict {
    Match,
    Divergence {
        turn: u32,
        stage: String,
        engine: usize,
        oracle: usize,
    },
}

impl OracleVerdict {
    pub fn is_match(&self) -> bool {
        matches!(self, OracleVerdict::Match)
    }
}

/// Zero-tolerance comparison; reports the first divergent (turn, stage).
pub fn assert_engine_matches_oracle(engine: &[TurnMetrics], oracle: &[TurnMetrics]) -> OracleVerdict {
    if engine.len() != oracle.len() {
        return OracleVerdict::Divergence {
            turn: engine.len().min(oracle.len()) as u32 + 1,
            stage: "turn_count".into(),
            engine: engine.len(),
            oracle: oracle.len(),
        };
    }
    for (e, o) in engine.iter().zip(oracle) {
        for stage in Stage::ALL {
            let (a, b) = (e.stage(stage), o.stage(stage));
            for (field, x, y) in [("prefill", a.prefill, b.prefill), ("generated", a.generated, b.generated)] {
                if x != y {
                    return OracleVerdict::Divergence {
                        turn: o.turn,
                        stage: format!("{stage}.{field}"),
                        engine: x,
                        oracle: y,
                    };
                }
            }
        }
        if e.classifier_calls != o.classifier_calls {
            return OracleVerdict::Divergence {
                turn: o.turn,
                stage: "classification.calls".into(),
                engine: e.classifier_calls,
                oracle: o.classifier_calls,
            };
        }
    }
    OracleVerdict::Match
}
