//! Segmented KV-cache data model.
//!
//! A [`KvCache`] is an ordered list of immutable, role-tagged [`Segment`]s held
//! behind `Arc`. Deriving a side path from a [`Checkpoint`] shares the prefix
//! segments instead of copying them, and nothing ever mutates a segment after
//! it is pushed, so a checkpoint cannot be disturbed by work done on a side
//! path. Lineage checks compare segment pointers.

mod ops;

pub use ops::{CacheOps, RetentionMode, SegmentCacheOps};

use std::collections::hash_map::DefaultHasher;
use std::fmt::{self, Write as _};
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What a run of cached tokens represents in the conversation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegmentRole {
    MainInstruction,
    TurnQuery,
    RetrievalContext,
    MainAnswer,
    SubtaskInstruction,
    SubtaskReasoning,
    SubtaskOutput,
    ClassifierInstruction,
    ClassifierOutput,
}

impl SegmentRole {
    pub const ALL: [SegmentRole; 9] = [
        SegmentRole::MainInstruction,
        SegmentRole::TurnQuery,
        SegmentRole::RetrievalContext,
        SegmentRole::MainAnswer,
        SegmentRole::SubtaskInstruction,
        SegmentRole::SubtaskReasoning,
        SegmentRole::SubtaskOutput,
        SegmentRole::ClassifierInstruction,
        SegmentRole::ClassifierOutput,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SegmentRole::MainInstruction => "main-instruction",
            SegmentRole::TurnQuery => "turn-query",
            SegmentRole::RetrievalContext => "retrieval-context",
            SegmentRole::MainAnswer => "main-answer",
            SegmentRole::SubtaskInstruction => "subtask-instruction",
            SegmentRole::SubtaskReasoning => "subtask-reasoning",
            SegmentRole::SubtaskOutput => "subtask-output",
            SegmentRole::ClassifierInstruction => "classifier-instruction",
            SegmentRole::ClassifierOutput => "classifier-output",
        }
    }

    /// Roles that belong to side paths and must never survive on the main path.
    pub fn is_side_path_only(self) -> bool {
        matches!(
            self,
            SegmentRole::SubtaskInstruction
                | SegmentRole::SubtaskReasoning
                | SegmentRole::ClassifierInstruction
                | SegmentRole::ClassifierOutput
        )
    }
}

impl fmt::Display for SegmentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Keys and values of one layer for a run of tokens, row-major `[tokens, dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv {
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
}

impl LayerKv {
    pub fn with_capacity(len: usize) -> Self {
        Self {
            keys: Vec::with_capacity(len),
            values: Vec::with_capacity(len),
        }
    }
}

/// A contiguous run of cached tokens with one role.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    role: SegmentRole,
    turn: u32,
    tokens: Vec<u32>,
    positions: Vec<u32>,
    kv: Option<Vec<LayerKv>>,
    tail_logits: Option<Vec<f32>>,
}

impl Segment {
    /// Builds a segment, checking the token/position/kv shape invariants.
    ///
    /// `tail_logits` are the next-token logits after the segment's last token,
    /// when the backend computes them.
    pub fn new(
        role: SegmentRole,
        turn: u32,
        tokens: Vec<u32>,
        positions: Vec<u32>,
        kv: Option<Vec<LayerKv>>,
        tail_logits: Option<Vec<f32>>,
    ) -> Result<Self> {
        if tokens.len() != positions.len() {
            return Err(Error::Precondition(format!(
                "{} tokens but {} positions",
                tokens.len(),
                positions.len()
            )));
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Precondition(
                "positions must be strictly increasing within a segment".into(),
            ));
        }
        if let Some(layers) = &kv {
            for layer in layers {
                let n = tokens.len();
                if n == 0 {
                    if !layer.keys.is_empty() || !layer.values.is_empty() {
                        return Err(Error::Precondition("kv entries for empty segment".into()));
                    }
                    continue;
                }
                if layer.keys.len() % n != 0
                    || layer.values.len() != layer.keys.len()
                    || layer.keys.is_empty()
                {
                    return Err(Error::Precondition(format!(
                        "kv block of {} keys / {} values does not match {} tokens",
                        layer.keys.len(),
                        layer.values.len(),
                        n
                    )));
                }
            }
        }
        Ok(Self {
            role,
            turn,
            tokens,
            positions,
            kv,
            tail_logits,
        })
    }

    pub fn role(&self) -> SegmentRole {
        self.role
    }

    pub fn turn(&self) -> u32 {
        self.turn
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn positions(&self) -> &[u32] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn kv(&self) -> Option<&[LayerKv]> {
        self.kv.as_deref()
    }

    pub fn tail_logits(&self) -> Option<&[f32]> {
        self.tail_logits.as_deref()
    }

    pub fn first_position(&self) -> Option<u32> {
        self.positions.first().copied()
    }

    pub fn last_position(&self) -> Option<u32> {
        self.positions.last().copied()
    }

    fn hash_into<H: Hasher>(&self, h: &mut H) {
        self.role.hash(h);
        self.turn.hash(h);
        self.tokens.hash(h);
        self.positions.hash(h);
        match &self.kv {
            None => 0u8.hash(h),
            Some(layers) => {
                1u8.hash(h);
                for layer in layers {
                    for x in layer.keys.iter().chain(&layer.values) {
                        x.to_bits().hash(h);
                    }
                }
            }
        }
        if let Some(logits) = &self.tail_logits {
            for x in logits {
                x.to_bits().hash(h);
            }
        }
    }
}

/// One row of the canonical cache dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSummary {
    pub role: SegmentRole,
    pub turn: u32,
    pub tokens: usize,
    /// Inclusive `[first, last]` position range; absent for empty segments.
    pub positions: Option<(u32, u32)>,
    pub kv: bool,
}

/// An ordered list of segments plus position bookkeeping.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    segments: Vec<Arc<Segment>>,
    len: usize,
    next_position: u32,
}

impl KvCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn next_position(&self) -> u32 {
        self.next_position
    }

    pub fn segments(&self) -> &[Arc<Segment>] {
        &self.segments
    }

    pub fn last_segment(&self) -> Option<&Arc<Segment>> {
        self.segments.last()
    }

    /// Next-token logits after the last cached token, if the backend keeps them.
    pub fn tail_logits(&self) -> Option<&[f32]> {
        self.segments.last().and_then(|s| s.tail_logits())
    }

    /// Appends a segment. Empty segments are dropped; positions must continue
    /// strictly after every position already cached.
    pub fn push(&mut self, segment: Arc<Segment>) -> Result<()> {
        let Some(first) = segment.first_position() else {
            return Ok(());
        };
        if !self.segments.is_empty() && first < self.next_position {
            return Err(Error::Precondition(format!(
                "segment starts at position {first}, cache already reaches {}",
                self.next_position
            )));
        }
        self.len += segment.len();
        self.next_position = segment.last_position().map_or(self.next_position, |p| p + 1);
        self.segments.push(segment);
        Ok(())
    }

    /// Count of tokens carrying `role`.
    pub fn tokens_with_role(&self, role: SegmentRole) -> usize {
        self.segments
            .iter()
            .filter(|s| s.role() == role)
            .map(|s| s.len())
            .sum()
    }

    pub fn summaries(&self) -> Vec<SegmentSummary> {
        self.segments
            .iter()
            .map(|s| SegmentSummary {
                role: s.role(),
                turn: s.turn(),
                tokens: s.len(),
                positions: s.first_position().zip(s.last_position()),
                kv: s.kv().is_some(),
            })
            .collect()
    }

    /// Canonical textual dump, one line per segment, stable field order.
    pub fn dump(&self) -> String {
        let mut out = format!(
            "kv-cache segments={} length={} next_position={}\n",
            self.segments.len(),
            self.len,
            self.next_position
        );
        for (i, s) in self.summaries().iter().enumerate() {
            let range = match s.positions {
                Some((a, b)) => format!("{a}..{b}"),
                None => "-".to_string(),
            };
            let _ = writeln!(
                out,
                "{i} role={} turn={} tokens={} positions={range} kv={}",
                s.role,
                s.turn,
                s.tokens,
                if s.kv { "present" } else { "absent" }
            );
        }
        out
    }

    /// Hash over every role, token, position and kv bit.
    pub fn fingerprint(&self) -> u64 {
        fingerprint(&self.segments, self.len, self.next_position)
    }

    /// True when `self` starts with exactly the segments of `cp` (pointer equality).
    pub fn derives_from(&self, cp: &Checkpoint) -> bool {
        self.segments.len() >= cp.segments.len()
            && self
                .segments
                .iter()
                .zip(cp.segments.iter())
                .all(|(a, b)| Arc::ptr_eq(a, b))
    }

    /// Structural equality: same segments in the same order with identical data.
    pub fn same_content(&self, other: &KvCache) -> bool {
        self.len == other.len
            && self.next_position == other.next_position
            && self.segments.len() == other.segments.len()
            && self
                .segments
                .iter()
                .zip(&other.segments)
                .all(|(a, b)| Arc::ptr_eq(a, b) || **a == **b)
    }

    pub(crate) fn from_parts(segments: Vec<Arc<Segment>>, len: usize, next_position: u32) -> Self {
        Self {
            segments,
            len,
            next_position,
        }
    }
}

fn fingerprint(segments: &[Arc<Segment>], len: usize, next_position: u32) -> u64 {
    let mut h = DefaultHasher::new();
    len.hash(&mut h);
    next_position.hash(&mut h);
    for s in segments {
        s.hash_into(&mut h);
    }
    h.finish()
}

/// Immutable snapshot of the main-path cache taken when a query arrives.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    segments: Arc<[Arc<Segment>]>,
    len: usize,
    next_position: u32,
    turn: u32,
}

impl Checkpoint {
    pub(crate) fn capture(cache: &KvCache, turn: u32) -> Self {
        Self {
            segments: cache.segments.clone().into(),
            len: cache.len,
            next_position: cache.next_position,
            turn,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn turn(&self) -> u32 {
        self.turn
    }

    pub fn next_position(&self) -> u32 {
        self.next_position
    }

    pub fn segments(&self) -> &[Arc<Segment>] {
        &self.segments
    }

    /// A fresh cache holding exactly the checkpointed prefix.
    pub fn to_cache(&self) -> KvCache {
        KvCache::from_parts(self.segments.to_vec(), self.len, self.next_position)
    }

    pub fn fingerprint(&self) -> u64 {
        fingerprint(&self.segments, self.len, self.next_position)
    }
}
