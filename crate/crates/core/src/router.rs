//! Sub-task selection: per-kind binary classifiers evaluated in priority
//! order with early exit, the batched variant that evaluates every kind on
//! its own fork of the checkpoint, and the single multi-choice baseline.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backend::{DecodeRequest, DecodeStage, ModelBackend, ScriptedBehavior, SegmentSpec};
use crate::cache::{CacheOps, Checkpoint, SegmentRole};
use crate::error::{Error, Result, StageExt};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubTaskKind {
    ApiCall,
    Math,
    QueryRewrite,
    ChatSummary,
    None,
}

impl SubTaskKind {
    pub const ALL: [SubTaskKind; 5] = [
        SubTaskKind::ApiCall,
        SubTaskKind::Math,
        SubTaskKind::QueryRewrite,
        SubTaskKind::ChatSummary,
        SubTaskKind::None,
    ];

    pub const ACTIONABLE: [SubTaskKind; 4] = [
        SubTaskKind::ApiCall,
        SubTaskKind::Math,
        SubTaskKind::QueryRewrite,
        SubTaskKind::ChatSummary,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SubTaskKind::ApiCall => "api_call",
            SubTaskKind::Math => "math",
            SubTaskKind::QueryRewrite => "query_rewrite",
            SubTaskKind::ChatSummary => "chat_summary",
            SubTaskKind::None => "none",
        }
    }

    pub fn is_actionable(self) -> bool {
        self != SubTaskKind::None
    }

    /// Whether the sub-task's final output is carried back onto the main path.
    pub fn retains_output(self) -> bool {
        matches!(self, SubTaskKind::ApiCall | SubTaskKind::Math)
    }

    /// Letter of this kind in the multi-choice instruction.
    pub fn option_letter(self) -> char {
        match self {
            SubTaskKind::QueryRewrite => 'A',
            SubTaskKind::ApiCall => 'B',
            SubTaskKind::ChatSummary => 'C',
            SubTaskKind::Math => 'D',
            SubTaskKind::None => 'E',
        }
    }

    pub fn from_option_letter(letter: char) -> Option<Self> {
        match letter.to_ascii_uppercase() {
            'A' => Some(SubTaskKind::QueryRewrite),
            'B' => Some(SubTaskKind::ApiCall),
            'C' => Some(SubTaskKind::ChatSummary),
            'D' => Some(SubTaskKind::Math),
            'E' => Some(SubTaskKind::None),
            _ => None,
        }
    }
}

impl fmt::Display for SubTaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SubTaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SubTaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown sub-task kind {s:?}")))
    }
}

/// Evaluation order of the four actionable kinds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<SubTaskKind>", into = "Vec<SubTaskKind>")]
pub struct PriorityOrder([SubTaskKind; 4]);

impl Default for PriorityOrder {
    fn default() -> Self {
        Self(SubTaskKind::ACTIONABLE)
    }
}

impl PriorityOrder {
    pub fn new(kinds: &[SubTaskKind]) -> Result<Self> {
        let mut sorted = kinds.to_vec();
        sorted.sort();
        if sorted != SubTaskKind::ACTIONABLE {
            return Err(Error::Config(format!(
                "priority order must be a permutation of {:?}, got {:?}",
                SubTaskKind::ACTIONABLE,
                kinds
            )));
        }
        let mut arr = [SubTaskKind::None; 4];
        arr.copy_from_slice(kinds);
        Ok(Self(arr))
    }

    pub fn kinds(&self) -> &[SubTaskKind; 4] {
        &self.0
    }

    /// Highest-priority kind accepted by `is_yes`, else `None`.
    pub fn argmax(&self, mut is_yes: impl FnMut(SubTaskKind) -> bool) -> SubTaskKind {
        self.0
            .iter()
            .copied()
            .find(|&k| is_yes(k))
            .unwrap_or(SubTaskKind::None)
    }
}

impl TryFrom<Vec<SubTaskKind>> for PriorityOrder {
    type Error = Error;

    fn try_from(v: Vec<SubTaskKind>) -> Result<Self> {
        Self::new(&v)
    }
}

impl From<PriorityOrder> for Vec<SubTaskKind> {
    fn from(p: PriorityOrder) -> Self {
        p.0.to_vec()
    }
}

impl FromStr for PriorityOrder {
    type Err = Error;

    /// Comma-separated kind names, e.g. `api_call,math,query_rewrite,chat_summary`.
    fn from_str(s: &str) -> Result<Self> {
        let kinds = s
            .split(',')
            .map(|p| p.trim().parse())
            .collect::<Result<Vec<SubTaskKind>>>()?;
        Self::new(&kinds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
}

impl Answer {
    pub fn is_yes(self) -> bool {
        self == Answer::Yes
    }

    /// The exact text a well-behaved classifier emits.
    pub fn as_output(self) -> &'static str {
        match self {
            Answer::Yes => "Yes",
            Answer::No => "No",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierVerdict {
    pub kind: SubTaskKind,
    pub answer: Answer,
    pub prefill_cost: usize,
    pub generation_cost: usize,
}

/// Result of one classification round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Routing {
    pub selected: SubTaskKind,
    /// Evaluated classifiers in priority order.
    pub verdicts: Vec<ClassifierVerdict>,
}

fn strip_answer_prefix(s: &str) -> &str {
    let t = s.trim_start();
    let head = t.get(..8).unwrap_or("");
    if head.eq_ignore_ascii_case("#answer:") {
        t[8..].trim_start()
    } else {
        t
    }
}

/// Parses a yes/no classifier output: the first alphabetic word (after an
/// optional `#Answer:` prefix) must be "yes" or "no", case-insensitively.
pub fn parse_yes_no(output: &str) -> Option<Answer> {
    let body = strip_answer_prefix(output);
    let start = body.find(|c: char| c.is_alphanumeric())?;
    let word: String = body[start..].chars().take_while(|c| c.is_alphabetic()).collect();
    match word.to_ascii_lowercase().as_str() {
        "yes" => Some(Answer::Yes),
        "no" => Some(Answer::No),
        _ => None,
    }
}

/// Parses a multi-choice output. Accepts `(X)` at the start, optionally
/// followed by more text, or a bare letter such as `X`, `X)` or `X.`.
pub fn parse_option_letter(output: &str) -> Option<SubTaskKind> {
    let body = strip_answer_prefix(output).trim_end();
    let mut chars = body.chars();
    match (chars.next(), chars.next(), chars.next()) {
        (Some('('), Some(letter), Some(')')) => SubTaskKind::from_option_letter(letter),
        (Some(letter), None | Some(')') | Some('.'), None) => {
            SubTaskKind::from_option_letter(letter)
        }
        _ => None,
    }
}

/// Evaluates kinds in order, stopping at the first yes.
pub fn select_hierarchical(
    order: &PriorityOrder,
    mut evaluate: impl FnMut(SubTaskKind) -> Result<ClassifierVerdict>,
) -> Result<Routing> {
    let mut verdicts = Vec::new();
    for &kind in order.kinds() {
        let v = evaluate(kind)?;
        let yes = v.answer.is_yes();
        verdicts.push(v);
        if yes {
            return Ok(Routing {
                selected: kind,
                verdicts,
            });
        }
    }
    Ok(Routing {
        selected: SubTaskKind::None,
        verdicts,
    })
}

/// Selection over a complete set of verdicts, independent of the order in
/// which they were produced.
pub fn select_batched(order: &PriorityOrder, mut verdicts: Vec<ClassifierVerdict>) -> Routing {
    let rank = |k: SubTaskKind| order.kinds().iter().position(|&o| o == k).unwrap_or(usize::MAX);
    verdicts.sort_by_key(|v| rank(v.kind));
    let selected = order.argmax(|k| verdicts.iter().any(|v| v.kind == k && v.answer.is_yes()));
    Routing { selected, verdicts }
}

/// Everything a classifier side path needs besides the checkpoint.
#[derive(Clone, Copy)]
pub struct ClassifierEnv<'a> {
    pub backend: &'a dyn ModelBackend,
    pub ops: &'a dyn CacheOps,
    /// Scripted outputs; `None` lets the backend generate freely.
    pub script: Option<&'a ScriptedBehavior>,
    pub turn: u32,
}

impl ClassifierEnv<'_> {
    fn request(&self, role: SegmentRole, stage: DecodeStage) -> DecodeRequest<'_> {
        let scripted = self.script.and_then(|s| s.lookup(self.turn, stage));
        let req = DecodeRequest::new(role, self.turn, stage).scripted(scripted);
        if scripted.is_some() {
            req
        } else {
            req.max_tokens(16).stop_tokens(&[b'\n' as u32])
        }
    }
}

pub type InstructionMap = BTreeMap<SubTaskKind, String>;

fn instruction_for(map: &InstructionMap, kind: SubTaskKind) -> Result<&str> {
    map.get(&kind)
        .map(String::as_str)
        .ok_or(Error::MissingInstruction(kind))
}

/// One binary classifier on a side path: branch, decode, evict.
pub fn evaluate_on_side_path(
    cp: &Checkpoint,
    kind: SubTaskKind,
    instruction: &str,
    env: &ClassifierEnv<'_>,
) -> Result<ClassifierVerdict> {
    let spec = SegmentSpec::from_text(
        SegmentRole::ClassifierInstruction,
        env.turn,
        instruction,
        env.backend.tokenizer(),
    );
    let (mut side, prefill_cost) = env.ops.branch(cp, spec, env.backend)?;
    let req = env.request(SegmentRole::ClassifierOutput, DecodeStage::Classify(kind));
    let out = env.backend.decode(&mut side, &req).stage("classify")?;
    env.ops.evict_to_checkpoint(side, cp)?;
    let answer = parse_yes_no(&out.text).ok_or_else(|| Error::ClassificationFormat {
        kind: kind.to_string(),
        output: out.text.clone(),
    })?;
    Ok(ClassifierVerdict {
        kind,
        answer,
        prefill_cost,
        generation_cost: out.tokens.len(),
    })
}

fn check_instructions(order: &PriorityOrder, instructions: &InstructionMap) -> Result<()> {
    for &kind in order.kinds() {
        instruction_for(instructions, kind)?;
    }
    Ok(())
}

/// Per-kind binary classification with early exit. Each evaluated classifier
/// prefills only its own instruction on top of the checkpoint.
pub fn classify_hierarchical(
    cp: &Checkpoint,
    order: &PriorityOrder,
    instructions: &InstructionMap,
    env: &ClassifierEnv<'_>,
) -> Result<Routing> {
    check_instructions(order, instructions)?;
    select_hierarchical(order, |kind| {
        evaluate_on_side_path(cp, kind, instruction_for(instructions, kind)?, env)
    })
}

/// All four classifiers at once, each on its own fork of the checkpoint.
/// Results are joined by priority, regardless of completion order.
pub fn classify_batched(
    cp: &Checkpoint,
    order: &PriorityOrder,
    instructions: &InstructionMap,
    env: &ClassifierEnv<'_>,
) -> Result<Routing> {
    if !env.backend.capabilities().supports_fork {
        return Err(Error::Unsupported("fork"));
    }
    check_instructions(order, instructions)?;
    let results: Vec<Result<ClassifierVerdict>> = std::thread::scope(|scope| {
        let handles: Vec<_> = order
            .kinds()
            .iter()
            .map(|&kind| {
                let instruction = instruction_for(instructions, kind);
                scope.spawn(move || evaluate_on_side_path(cp, kind, instruction?, env))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("classifier thread panicked"))
            .collect()
    });
    let verdicts = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(select_batched(order, verdicts))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MultiChoiceOutcome {
    pub selected: SubTaskKind,
    pub prefill_cost: usize,
    pub generation_cost: usize,
}

/// The multi-choice baseline: one side path, one option letter.
pub fn classify_multichoice(
    cp: &Checkpoint,
    combined_instruction: &str,
    env: &ClassifierEnv<'_>,
) -> Result<MultiChoiceOutcome> {
    let spec = SegmentSpec::from_text(
        SegmentRole::ClassifierInstruction,
        env.turn,
        combined_instruction,
        env.backend.tokenizer(),
    );
    let (mut side, prefill_cost) = env.ops.branch(cp, spec, env.backend)?;
    let req = env.request(SegmentRole::ClassifierOutput, DecodeStage::MultiChoice);
    let out = env.backend.decode(&mut side, &req).stage("classify")?;
    env.ops.evict_to_checkpoint(side, cp)?;
    let selected = parse_option_letter(&out.text).ok_or_else(|| Error::ClassificationFormat {
        kind: "multichoice".into(),
        output: out.text.clone(),
    })?;
    Ok(MultiChoiceOutcome {
        selected,
        prefill_cost,
        generation_cost: out.tokens.len(),
    })
}
