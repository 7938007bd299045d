use serde::{Deserialize, Serialize};

use super::StrategyConfig;
use crate::cache::{SegmentRole, SegmentSummary};
use crate::metrics::{CumulativeCurve, StageCost, TurnMetrics};
use crate::router::SubTaskKind;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub turn: u32,
    pub query: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<String>,
    pub answer: String,
    pub selected_subtask: SubTaskKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subtask_output: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub script_id: String,
    pub strategy: String,
    pub config: StrategyConfig,
    pub backend: String,
    pub tokenizer: String,
    pub turns: Vec<TurnRecord>,
    pub metrics: Vec<TurnMetrics>,
    pub cumulative: CumulativeCurve,
    /// Main-path cache length at the end of each turn. For the re-load
    /// strategies this is the answer stage's rebuilt cache.
    pub main_cache_lengths: Vec<usize>,
    /// Earlier turns visible to the answer stage of each turn.
    pub context_turns: Vec<Vec<u32>>,
    /// Segments of the main cache after the last turn.
    pub final_cache: Vec<SegmentSummary>,
}

impl SessionReport {
    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn total(&self) -> StageCost {
        self.metrics.iter().fold(StageCost::default(), |acc, m| acc + m.total())
    }

    pub fn final_tokens_with_role(&self, role: SegmentRole) -> usize {
        self.final_cache
            .iter()
            .filter(|s| s.role == role)
            .map(|s| s.tokens)
            .sum()
    }
}
