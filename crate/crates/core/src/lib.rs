//! Task-level KV-cache reuse for multi-turn conversations.
//!
//! A conversation's main-path cache is checkpointed when each query arrives.
//! Routing classifiers and sub-tasks run on side paths branched from that
//! checkpoint, and the side paths are evicted afterwards, so the main path
//! never pays to re-read its own history. A sub-task's final output may be
//! carried back onto the main path.
//!
//! The crate ships two backends: [`CountingBackend`] replays scripted outputs
//! and counts tokens exactly, and [`ToyBackend`] is a small seeded transformer
//! used to check the cache algebra numerically.

pub mod backend;
pub mod cache;
pub mod error;
pub mod metrics;
pub mod orchestrator;
pub mod router;
pub mod script;
pub mod tokenizer;
pub mod verify;

pub use backend::{
    Capabilities, CountingBackend, DecodeOutcome, DecodeRequest, DecodeStage, ModelBackend,
    PositionEncoding, PrefillOutcome, ScriptedBehavior, SegmentSpec, ToyBackend, ToyTransformerConfig,
};
pub use cache::{
    CacheOps, Checkpoint, KvCache, LayerKv, RetentionMode, Segment, SegmentCacheOps, SegmentRole,
    SegmentSummary,
};
pub use error::{Error, Result, ValidationIssue};
pub use metrics::{
    assert_engine_matches_oracle, latency_proxy, oracle_counts, Calibration, ComparisonTable,
    CumulativeCurve, OracleVerdict, Stage, StageCost, TurnMetrics,
};
pub use orchestrator::{
    compare_strategies, run_conversation, run_conversation_with, ClassificationMode, SessionReport,
    Strategy, StrategyConfig, TurnRecord,
};
pub use router::{Answer, ClassifierVerdict, PriorityOrder, SubTaskKind};
pub use script::{generate_synthetic, load_and_validate, ConversationScript, SyntheticProfile, TurnSpec};
pub use tokenizer::Tokenizer;
