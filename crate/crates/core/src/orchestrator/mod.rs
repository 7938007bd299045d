//! Per-turn execution under each strategy.

mod report;
mod session;
mod sink;

pub use report::{SessionReport, TurnRecord};
pub use session::{compare_strategies, run_conversation, run_conversation_with};
pub use sink::{JsonlSink, MemorySink, SummaryEntry, SummarySink};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cache::RetentionMode;
use crate::error::{Error, Result};
use crate::router::PriorityOrder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Ciflex,
    FullReload,
    RecentReload,
    Seamless,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Ciflex,
        Strategy::FullReload,
        Strategy::RecentReload,
        Strategy::Seamless,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Ciflex => "ciflex",
            Strategy::FullReload => "full-reload",
            Strategy::RecentReload => "recent-reload",
            Strategy::Seamless => "seamless",
        }
    }

    pub fn default_classification(self) -> ClassificationMode {
        match self {
            Strategy::Seamless => ClassificationMode::Multichoice,
            _ => ClassificationMode::Hierarchical,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().replace('_', "-");
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassificationMode {
    Hierarchical,
    Batched,
    Multichoice,
}

impl ClassificationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassificationMode::Hierarchical => "hierarchical",
            ClassificationMode::Batched => "batched",
            ClassificationMode::Multichoice => "multichoice",
        }
    }
}

impl fmt::Display for ClassificationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassificationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "hierarchical" | "sequential" => Ok(ClassificationMode::Hierarchical),
            "batched" => Ok(ClassificationMode::Batched),
            "multichoice" | "multi-choice" => Ok(ClassificationMode::Multichoice),
            other => Err(Error::Config(format!("unknown classification mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    pub recent_window: usize,
    /// Only consulted by ciflex.
    pub retention_mode: RetentionMode,
    pub classification_mode: ClassificationMode,
    pub priority: PriorityOrder,
}

impl StrategyConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            recent_window: 5,
            retention_mode: RetentionMode::default(),
            classification_mode: strategy.default_classification(),
            priority: PriorityOrder::default(),
        }
    }

    pub fn with_classification(mut self, mode: ClassificationMode) -> Self {
        self.classification_mode = mode;
        self
    }

    pub fn with_retention(mut self, mode: RetentionMode) -> Self {
        self.retention_mode = mode;
        self
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.recent_window = window;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.recent_window == 0 {
            return Err(Error::Config("recent_window must be at least 1".into()));
        }
        if self.strategy == Strategy::Seamless && self.classification_mode == ClassificationMode::Batched {
            return Err(Error::Config(
                "seamless keeps one cache and cannot run classifiers on forks".into(),
            ));
        }
        Ok(())
    }

    /// `strategy`, or `strategy:mode` when the mode is not the strategy's default.
    pub fn label(&self) -> String {
        if self.classification_mode == self.strategy.default_classification() {
            self.strategy.to_string()
        } else {
            format!("{}:{}", self.strategy, self.classification_mode)
        }
    }
}

impl FromStr for StrategyConfig {
    type Err = Error;

    /// Parses `name` or `name:mode`, e.g. `full-reload:multichoice`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, mode) = match s.split_once(':') {
            Some((n, m)) => (n, Some(m)),
            None => (s, None),
        };
        let mut cfg = StrategyConfig::new(name.parse()?);
        if let Some(m) = mode {
            cfg.classification_mode = m.parse()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_labels() {
        let c: StrategyConfig = "full_reload:multichoice".parse().unwrap();
        assert_eq!(c.strategy, Strategy::FullReload);
        assert_eq!(c.label(), "full-reload:multichoice");
        let s: StrategyConfig = "seamless".parse().unwrap();
        assert_eq!(s.classification_mode, ClassificationMode::Multichoice);
        assert_eq!(s.label(), "seamless");
        assert!("seamless:batched".parse::<StrategyConfig>().is_err());
        assert!("turbo".parse::<StrategyConfig>().is_err());
        assert!("ciflex:guess".parse::<StrategyConfig>().is_err());
    }

    #[test]
    fn window_must_be_positive() {
        assert!(StrategyConfig::new(Strategy::RecentReload).with_window(0).validate().is_err());
    }
}
