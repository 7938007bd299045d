//! Per-stage token accounting, cumulative curves, the latency proxy and the
//! replay oracle the engine is checked against.

mod latency;
mod oracle;
mod table;

pub use latency::{latency_proxy, Calibration, TurnLatency};
pub use oracle::{assert_engine_matches_oracle, oracle_counts, OracleVerdict};
pub use table::{ComparisonRow, ComparisonTable, StrategyTotals};

use std::fmt;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCost {
    pub prefill: usize,
    pub generated: usize,
}

impl StageCost {
    pub fn new(prefill: usize, generated: usize) -> Self {
        Self { prefill, generated }
    }
}

impl Add for StageCost {
    type Output = StageCost;

    fn add(self, rhs: StageCost) -> StageCost {
        StageCost::new(self.prefill + rhs.prefill, self.generated + rhs.generated)
    }
}

impl AddAssign for StageCost {
    fn add_assign(&mut self, rhs: StageCost) {
        *self = *self + rhs;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Classification,
    Subtask,
    MainAnswer,
    TurnUpdate,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::Classification,
        Stage::Subtask,
        Stage::MainAnswer,
        Stage::TurnUpdate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Classification => "classification",
            Stage::Subtask => "subtask",
            Stage::MainAnswer => "main_answer",
            Stage::TurnUpdate => "turn_update",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnMetrics {
    pub turn: u32,
    pub classification: StageCost,
    pub subtask: StageCost,
    pub main_answer: StageCost,
    pub turn_update: StageCost,
    pub classifier_calls: usize,
    /// Cost of each classifier side path, in evaluation order.
    pub classifier_branches: Vec<StageCost>,
    /// Whether the classifier branches ran concurrently.
    pub batched: bool,
}

impl TurnMetrics {
    pub fn new(turn: u32, batched: bool) -> Self {
        Self {
            turn,
            batched,
            ..Self::default()
        }
    }

    pub fn stage(&self, stage: Stage) -> StageCost {
        match stage {
            Stage::Classification => self.classification,
            Stage::Subtask => self.subtask,
            Stage::MainAnswer => self.main_answer,
            Stage::TurnUpdate => self.turn_update,
        }
    }

    pub fn stage_mut(&mut self, stage: Stage) -> &mut StageCost {
        match stage {
            Stage::Classification => &mut self.classification,
            Stage::Subtask => &mut self.subtask,
            Stage::MainAnswer => &mut self.main_answer,
            Stage::TurnUpdate => &mut self.turn_update,
        }
    }

    pub fn record_classifier(&mut self, cost: StageCost) {
        self.classification += cost;
        self.classifier_calls += 1;
        self.classifier_branches.push(cost);
    }

    pub fn total(&self) -> StageCost {
        Stage::ALL.iter().fold(StageCost::default(), |acc, &s| acc + self.stage(s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CumulativePoint {
    pub turn: u32,
    pub prefill: usize,
    pub generated: usize,
    pub classification_prefill: usize,
}

/// Running totals after each turn.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CumulativeCurve {
    pub points: Vec<CumulativePoint>,
}

impl CumulativeCurve {
    pub fn from_metrics(metrics: &[TurnMetrics]) -> Self {
        let mut acc = StageCost::default();
        let mut cls = 0;
        let points = metrics
            .iter()
            .map(|m| {
                acc += m.total();
                cls += m.classification.prefill;
                CumulativePoint {
                    turn: m.turn,
                    prefill: acc.prefill,
                    generated: acc.generated,
                    classification_prefill: cls,
                }
            })
            .collect();
        Self { points }
    }

    pub fn at_turn(&self, turn: u32) -> Option<&CumulativePoint> {
        self.points.iter().find(|p| p.turn == turn)
    }

    pub fn last(&self) -> Option<&CumulativePoint> {
        self.points.last()
    }

    pub fn is_monotone(&self) -> bool {
        self.points.windows(2).all(|w| {
            w[0].prefill <= w[1].prefill
                && w[0].generated <= w[1].generated
                && w[0].classification_prefill <= w[1].classification_prefill
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_accumulates() {
        let mut a = TurnMetrics::new(1, false);
        a.record_classifier(StageCost::new(10, 1));
        a.main_answer = StageCost::new(5, 7);
        let mut b = TurnMetrics::new(2, false);
        b.turn_update = StageCost::new(3, 0);
        let curve = CumulativeCurve::from_metrics(&[a.clone(), b]);
        assert_eq!(a.total(), StageCost::new(15, 8));
        assert_eq!(curve.points[1].prefill, 18);
        assert_eq!(curve.points[1].classification_prefill, 10);
        assert!(curve.is_monotone());
        assert_eq!(a.classifier_calls, 1);
    }
}
