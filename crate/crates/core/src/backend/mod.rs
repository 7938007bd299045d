//! Model backend contract plus the counting and toy-transformer implementations.

mod counting;
mod scripted;
mod toy;

pub use counting::CountingBackend;
pub use scripted::ScriptedBehavior;
pub use toy::{PositionEncoding, ToyBackend, ToyTransformerConfig};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cache::{KvCache, SegmentRole};
use crate::error::{Error, Result};
use crate::router::SubTaskKind;
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capabilities {
    pub supports_fork: bool,
    pub supports_suffix_evict: bool,
    /// Whether prefill materializes numeric key/value blocks.
    pub numeric_kv: bool,
}

/// Tokens waiting to be prefilled as one segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentSpec {
    pub role: SegmentRole,
    pub turn: u32,
    pub tokens: Vec<u32>,
}

impl SegmentSpec {
    pub fn new(role: SegmentRole, turn: u32, tokens: Vec<u32>) -> Self {
        Self { role, turn, tokens }
    }

    pub fn from_text(role: SegmentRole, turn: u32, text: &str, tokenizer: Tokenizer) -> Self {
        Self::new(role, turn, tokenizer.encode(text))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefillOutcome {
    /// Tokens processed by this prefill; the cost unit of the whole engine.
    pub tokens: usize,
}

/// Which generation a decode call serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "stage", content = "kind")]
pub enum DecodeStage {
    Classify(SubTaskKind),
    MultiChoice,
    SubtaskReasoning,
    SubtaskOutput,
    Answer,
}

impl fmt::Display for DecodeStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeStage::Classify(kind) => write!(f, "classify:{kind}"),
            DecodeStage::MultiChoice => f.write_str("multichoice"),
            DecodeStage::SubtaskReasoning => f.write_str("subtask-reasoning"),
            DecodeStage::SubtaskOutput => f.write_str("subtask-output"),
            DecodeStage::Answer => f.write_str("answer"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecodeRequest<'a> {
    pub role: SegmentRole,
    pub turn: u32,
    pub stage: DecodeStage,
    /// Text the backend must emit instead of generating freely.
    pub scripted: Option<&'a str>,
    pub max_tokens: usize,
    pub stop_tokens: &'a [u32],
}

impl<'a> DecodeRequest<'a> {
    pub fn new(role: SegmentRole, turn: u32, stage: DecodeStage) -> Self {
        Self {
            role,
            turn,
            stage,
            scripted: None,
            max_tokens: usize::MAX,
            stop_tokens: &[],
        }
    }

    pub fn scripted(mut self, text: Option<&'a str>) -> Self {
        self.scripted = text;
        self
    }

    pub fn max_tokens(mut self, max: usize) -> Self {
        self.max_tokens = max;
        self
    }

    pub fn stop_tokens(mut self, stop: &'a [u32]) -> Self {
        self.stop_tokens = stop;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeOutcome {
    pub tokens: Vec<u32>,
    pub text: String,
}

/// The language model seen by the engine.
///
/// Backends keep no per-conversation state: every cache is passed in
/// explicitly, and costs are reported through return values.
pub trait ModelBackend: Send + Sync {
    fn name(&self) -> &str;

    fn tokenizer(&self) -> Tokenizer;

    fn capabilities(&self) -> Capabilities;

    /// Extends `cache` by exactly `segment.tokens.len()` entries.
    fn prefill(&self, cache: &mut KvCache, segment: SegmentSpec) -> Result<PrefillOutcome>;

    /// Greedy generation. Each emitted token becomes one cache entry, all in a
    /// single new segment with `request.role`.
    fn decode(&self, cache: &mut KvCache, request: &DecodeRequest<'_>) -> Result<DecodeOutcome>;

    fn fork(&self, cache: &KvCache) -> Result<KvCache> {
        if !self.capabilities().supports_fork {
            return Err(Error::Unsupported("fork"));
        }
        // segments are immutable once pushed, so sharing them is isolation
        Ok(cache.clone())
    }

    fn prefill_text(
        &self,
        cache: &mut KvCache,
        role: SegmentRole,
        turn: u32,
        text: &str,
    ) -> Result<PrefillOutcome> {
        let spec = SegmentSpec::from_text(role, turn, text, self.tokenizer());
        self.prefill(cache, spec)
    }
}
