use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{ModelBackend, SegmentSpec};
use crate::cache::{Checkpoint, KvCache, Segment, SegmentRole};
use crate::error::{Error, Result, StageExt};

/// How a retained sub-task output is placed back on the main path once the
/// side path that produced it is evicted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetentionMode {
    /// Reuse the side-path entries as they are. Their positions keep the gap
    /// left by the evicted instruction; nothing is recomputed.
    #[default]
    PreservePositions,
    /// Re-prefill the output tokens at contiguous positions after the checkpoint.
    Recompute,
}

impl std::str::FromStr for RetentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "preserve-positions" | "preserve" => Ok(Self::PreservePositions),
            "recompute" => Ok(Self::Recompute),
            other => Err(Error::Config(format!("unknown retention mode {other:?}"))),
        }
    }
}

/// The cache algebra: checkpoint, branch, evict, rollback, advance.
///
/// Each operation returns the number of tokens it had to prefill alongside the
/// resulting cache.
pub trait CacheOps: Send + Sync {
    fn checkpoint(&self, main: &KvCache, turn: u32) -> Result<Checkpoint>;

    /// Side cache = checkpoint ⊕ prefilled instruction.
    fn branch(
        &self,
        cp: &Checkpoint,
        instruction: SegmentSpec,
        backend: &dyn ModelBackend,
    ) -> Result<(KvCache, usize)>;

    /// Drops everything a side path added after `cp`.
    fn evict_to_checkpoint(&self, side: KvCache, cp: &Checkpoint) -> Result<KvCache>;

    /// Main path resumed as checkpoint ⊕ retained output.
    fn rollback(
        &self,
        cp: &Checkpoint,
        retained: Option<&Arc<Segment>>,
        mode: RetentionMode,
        backend: &dyn ModelBackend,
    ) -> Result<(KvCache, usize)>;

    /// Next main cache = rollback ⊕ answer ⊕ prefilled next query.
    fn advance_turn(
        &self,
        rollback: KvCache,
        answer: Option<Arc<Segment>>,
        next_query: Option<SegmentSpec>,
        backend: &dyn ModelBackend,
    ) -> Result<(KvCache, usize)>;
}

/// The standard [`CacheOps`] over segmented caches.
#[derive(Debug, Clone, Copy, Default)]
pub struct SegmentCacheOps;

impl CacheOps for SegmentCacheOps {
    fn checkpoint(&self, main: &KvCache, turn: u32) -> Result<Checkpoint> {
        if let Some(last) = main.last_segment() {
            if last.role() != SegmentRole::TurnQuery || last.turn() != turn {
                return Err(Error::Precondition(format!(
                    "checkpoint for turn {turn} requires the cache to end with that turn's query, found {} of turn {}",
                    last.role(),
                    last.turn()
                )));
            }
        }
        Ok(Checkpoint::capture(main, turn))
    }

    fn branch(
        &self,
        cp: &Checkpoint,
        instruction: SegmentSpec,
        backend: &dyn ModelBackend,
    ) -> Result<(KvCache, usize)> {
        if !matches!(
            instruction.role,
            SegmentRole::SubtaskInstruction | SegmentRole::ClassifierInstruction
        ) {
            return Err(Error::Role {
                expected: "subtask-instruction or classifier-instruction",
                found: instruction.role,
            });
        }
        let mut side = cp.to_cache();
        let out = backend.prefill(&mut side, instruction).stage("branch")?;
        Ok((side, out.tokens))
    }

    fn evict_to_checkpoint(&self, side: KvCache, cp: &Checkpoint) -> Result<KvCache> {
        if !side.derives_from(cp) {
            return Err(Error::Lineage(format!(
                "cache of {} tokens was not derived from the checkpoint of turn {}",
                side.len(),
                cp.turn()
            )));
        }
        Ok(cp.to_cache())
    }

    fn rollback(
        &self,
        cp: &Checkpoint,
        retained: Option<&Arc<Segment>>,
        mode: RetentionMode,
        backend: &dyn ModelBackend,
    ) -> Result<(KvCache, usize)> {
        let mut cache = cp.to_cache();
        let Some(output) = retained else {
            return Ok((cache, 0));
        };
        if output.role() != SegmentRole::SubtaskOutput {
            return Err(Error::Role {
                expected: "subtask-output",
                found: output.role(),
            });
        }
        if output.first_position().is_some_and(|p| p < cp.next_position()) {
            return Err(Error::Lineage(
                "retained output predates the checkpoint it is rolled back onto".into(),
            ));
        }
        match mode {
            RetentionMode::PreservePositions => {
                cache.push(Arc::clone(output))?;
                Ok((cache, 0))
            }
            RetentionMode::Recompute => {
                let spec = SegmentSpec::new(SegmentRole::SubtaskOutput, output.turn(), output.tokens().to_vec());
                let out = backend.prefill(&mut cache, spec).stage("rollback")?;
                Ok((cache, out.tokens))
            }
        }
    }

    fn advance_turn(
        &self,
        rollback: KvCache,
        answer: Option<Arc<Segment>>,
        next_query: Option<SegmentSpec>,
        backend: &dyn ModelBackend,
    ) -> Result<(KvCache, usize)> {
        let mut cache = rollback;
        if let Some(answer) = answer {
            if answer.role() != SegmentRole::MainAnswer {
                return Err(Error::Role {
                    expected: "main-answer",
                    found: answer.role(),
                });
            }
            if backend.capabilities().numeric_kv && !answer.is_empty() && answer.kv().is_none() {
                return Err(Error::Precondition(
                    "answer segment must carry the kv produced while decoding".into(),
                ));
            }
            cache.push(answer)?;
        }
        let mut cost = 0;
        if let Some(query) = next_query {
            if query.role != SegmentRole::TurnQuery {
                return Err(Error::Role {
                    expected: "turn-query",
                    found: query.role,
                });
            }
            cost = backend.prefill(&mut cache, query).stage("advance-turn")?.tokens;
        }
        Ok((cache, cost))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{CountingBackend, DecodeRequest, DecodeStage};
    use crate::tokenizer::Tokenizer;

    fn words(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    fn main_cache(b: &CountingBackend) -> KvCache {
        let mut c = KvCache::new();
        b.prefill_text(&mut c, SegmentRole::MainInstruction, 0, &words(12)).unwrap();
        b.prefill_text(&mut c, SegmentRole::TurnQuery, 1, &words(7)).unwrap();
        c
    }

    fn spec(role: SegmentRole, n: usize) -> SegmentSpec {
        SegmentSpec::from_text(role, 1, &words(n), Tokenizer::Whitespace)
    }

    #[test]
    fn checkpoint_lengths() {
        let ops = SegmentCacheOps;
        let b = CountingBackend::default();
        assert_eq!(ops.checkpoint(&KvCache::new(), 1).unwrap().len(), 0);
        assert_eq!(ops.checkpoint(&main_cache(&b), 1).unwrap().len(), 19);
    }

    #[test]
    fn checkpoint_requires_trailing_query() {
        let ops = SegmentCacheOps;
        let b = CountingBackend::default();
        let mut c = KvCache::new();
        b.prefill_text(&mut c, SegmentRole::MainInstruction, 0, "x y").unwrap();
        assert!(matches!(ops.checkpoint(&c, 1), Err(Error::Precondition(_))));
        assert!(ops.checkpoint(&main_cache(&b), 2).is_err());
    }

    #[test]
    fn branch_length_arithmetic() {
        let ops = SegmentCacheOps;
        let b = CountingBackend::default();
        let cp = ops.checkpoint(&main_cache(&b), 1).unwrap();
        let (side, cost) = ops.branch(&cp, spec(SegmentRole::SubtaskInstruction, 9), &b).unwrap();
        assert_eq!(side.len(), 28);
        assert_eq!(cost, 9);
        assert_eq!(side.segments().len(), 3);
        assert_eq!(side.last_segment().unwrap().role(), SegmentRole::SubtaskInstruction);
        assert_eq!(cp.len(), 19);
    }

    #[test]
    fn branch_with_empty_instruction_is_identity() {
        let ops = SegmentCacheOps;
        let b = CountingBackend::default();
        let cp = ops.checkpoint(&main_cache(&b), 1).unwrap();
        let (side, cost) = ops.branch(&cp, spec(SegmentRole::ClassifierInstruction, 0), &b).unwrap();
        assert_eq!(cost, 0);
        assert!(side.same_content(&cp.to_cache()));
    }

    #[test]
    fn branch_rejects_wrong_role() {
        let ops = SegmentCacheOps;
        let b = CountingBackend::default();
        let cp = ops.checkpoint(&main_cache(&b), 1).unwrap();
        assert!(matches!(
            ops.branch(&cp, spec(SegmentRole::MainAnswer, 2), &b),
            Err(Error::Role { .. })
        ));
    }

    #[test]
    fn evict_after_decode_restores_checkpoint() {
        let ops = SegmentCacheOps;
        let b = CountingBackend::default();
        let cp = ops.checkpoint(&main_cache(&b), 1).unwrap();
        let fp = cp.fingerprint();
        let (mut side, _) = ops.branch(&cp, spec(SegmentRole::SubtaskInstruction, 9), &b).unwrap();
        let text = words(6);
        let req = DecodeRequest::new(SegmentRole::SubtaskReasoning, 1, DecodeStage::SubtaskReasoning)
            .scripted(Some(&text));
        b.decode(&mut side, &req).unwrap();
        assert_eq!(side.len(), 34);
        let back = ops.evict_to_checkpoint(side, &cp).unwrap();
        assert!(back.same_content(&cp.to_cache()));
        assert_eq!(back.fingerprint(), fp);
        assert_eq!(cp.fingerprint(), fp);
    }

    #[test]
    fn evict_rejects_foreign_cache() {
        let ops = SegmentCacheOps;
        let b = CountingBackend::default();
        let cp = ops.checkpoint(&main_cache(&b), 1).unwrap();
        let foreign = main_cache(&b);
        assert!(matches!(ops.evict_to_checkpoint(foreign, &cp), Err(Error::Lineage(_))));
    }

    fn side_output(ops: &SegmentCacheOps, b: &CountingBackend, cp: &Checkpoint) -> Arc<Segment> {
        let (mut side, _) = ops.branch(cp, spec(SegmentRole::SubtaskInstruction, 9), b).unwrap();
        let text = words(15);
        let req = DecodeRequest::new(SegmentRole::SubtaskOutput, 1, DecodeStage::SubtaskOutput)
            .scripted(Some(&text));
        b.decode(&mut side, &req).unwrap();
        Arc::clone(side.last_segment().unwrap())
    }

    #[test]
    fn rollback_without_output_is_checkpoint() {
        let ops = SegmentCacheOps;
        let b = CountingBackend::default();
        let cp = ops.checkpoint(&main_cache(&b), 1).unwrap();
        let (c, cost) = ops.rollback(&cp, None, RetentionMode::PreservePositions, &b).unwrap();
        assert_eq!(cost, 0);
        assert_eq!(c.len(), 19);
        assert!(c.same_content(&cp.to_cache()));
    }

    #[test]
    fn rollback_preserve_keeps_side_positions() {
        let ops = SegmentCacheOps;
        let b = CountingBackend::default();
        let cp = ops.checkpoint(&main_cache(&b), 1).unwrap();
        let out = side_output(&ops, &b, &cp);
        let (c, cost) = ops.rollback(&cp, Some(&out), RetentionMode::PreservePositions, &b).unwrap();
        assert_eq!(cost, 0);
        assert_eq!(c.len(), 34);
        let last = c.last_segment().unwrap();
        assert_eq!(last.first_position(), Some(28));
        assert_eq!(last.last_position(), Some(42));
        assert_eq!(c.next_position(), 43);
    }

    #[test]
    fn rollback_recompute_is_contiguous() {
        let ops = SegmentCacheOps;
        let b = CountingBackend::default();
        let cp = ops.checkpoint(&main_cache(&b), 1).unwrap();
        let out = side_output(&ops, &b, &cp);
        let (c, cost) = ops.rollback(&cp, Some(&out), RetentionMode::Recompute, &b).unwrap();
        assert_eq!(cost, 15);
        assert_eq!(c.len(), 34);
        let last = c.last_segment().unwrap();
        assert_eq!(last.first_position(), Some(19));
        assert_eq!(last.last_position(), Some(33));
    }

    #[test]
    fn rollback_rejects_wrong_role() {
        let ops = SegmentCacheOps;
        let b = CountingBackend::default();
        let cp = ops.checkpoint(&main_cache(&b), 1).unwrap();
        let (side, _) = ops.branch(&cp, spec(SegmentRole::SubtaskInstruction, 3), &b).unwrap();
        let instr = Arc::clone(side.last_segment().unwrap());
        assert!(matches!(
            ops.rollback(&cp, Some(&instr), RetentionMode::PreservePositions, &b),
            Err(Error::Role { .. })
        ));
    }

    #[test]
    fn advance_turn_costs_only_next_query() {
        let ops = SegmentCacheOps;
        let b = CountingBackend::default();
        let cp = ops.checkpoint(&main_cache(&b), 1).unwrap();
        let out = side_output(&ops, &b, &cp);
        let (rb, _) = ops.rollback(&cp, Some(&out), RetentionMode::PreservePositions, &b).unwrap();
        assert_eq!(rb.len(), 34);

        let mut work = rb.clone();
        let text = words(11);
        let req = DecodeRequest::new(SegmentRole::MainAnswer, 1, DecodeStage::Answer).scripted(Some(&text));
        b.decode(&mut work, &req).unwrap();
        let answer = Arc::clone(work.last_segment().unwrap());

        let q = SegmentSpec::from_text(SegmentRole::TurnQuery, 2, &words(6), Tokenizer::Whitespace);
        let (next, cost) = ops.advance_turn(rb, Some(answer), Some(q), &b).unwrap();
        assert_eq!(next.len(), 51);
        assert_eq!(cost, 6);
        assert!(ops.checkpoint(&next, 2).is_ok());
    }

    #[test]
    fn advance_turn_rejects_non_answer() {
        let ops = SegmentCacheOps;
        let b = CountingBackend::default();
        let c = main_cache(&b);
        let q = Arc::clone(c.last_segment().unwrap());
        assert!(matches!(
            ops.advance_turn(c, Some(q), None, &b),
            Err(Error::Role { .. })
        ));
    }
}
