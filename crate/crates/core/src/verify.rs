//! Property suites behind `sidepath verify`.
//!
//! Each suite returns one outcome per named property. Suites take the cache
//! operations as a parameter so a deliberately broken implementation can be
//! run through them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backend::{CountingBackend, DecodeRequest, DecodeStage, ModelBackend, ScriptedBehavior, SegmentSpec, ToyBackend};
use crate::cache::{CacheOps, Checkpoint, KvCache, RetentionMode, Segment, SegmentRole};
use crate::error::{Error, Result};
use crate::metrics::{assert_engine_matches_oracle, oracle_counts};
use crate::orchestrator::{run_conversation_with, MemorySink, Strategy, StrategyConfig};
use crate::router::{self, Answer, ClassifierEnv, PriorityOrder, SubTaskKind};
use crate::script::{generate_synthetic, ConversationScript, LengthRange, MixRatios, SyntheticProfile};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    CacheAlgebra,
    Router,
    Oracle,
    Toy,
    All,
}

impl Suite {
    pub const EACH: [Suite; 4] = [Suite::CacheAlgebra, Suite::Router, Suite::Oracle, Suite::Toy];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::CacheAlgebra => "cache-algebra",
            Suite::Router => "router",
            Suite::Oracle => "oracle",
            Suite::Toy => "toy",
            Suite::All => "all",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Suite::All].into_iter()
            .chain(Suite::EACH)
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PropertyOutcome {
    pub suite: &'static str,
    pub property: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Randomized cases per cache property.
    pub cases: usize,
    /// Random scripts in the oracle sweep; each runs under four strategies.
    pub scripts: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 7,
            cases: 100,
            scripts: 100,
        }
    }
}

pub fn run_suite(suite: Suite, ops: &dyn CacheOps, opts: &VerifyOptions) -> Result<Vec<PropertyOutcome>> {
    match suite {
        Suite::CacheAlgebra => cache_algebra(ops, opts),
        Suite::Router => router_suite(ops),
        Suite::Oracle => oracle_suite(ops, opts),
        Suite::Toy => toy_suite(ops, opts),
        Suite::All => {
            let mut all = Vec::new();
            for s in Suite::EACH {
                all.extend(run_suite(s, ops, opts)?);
            }
            Ok(all)
        }
    }
}

/// Segment-for-segment equality down to the bit pattern of every kv float.
pub fn bitwise_equal(a: &KvCache, b: &KvCache) -> bool {
    a.len() == b.len()
        && a.next_position() == b.next_position()
        && a.segments().len() == b.segments().len()
        && a.segments().iter().zip(b.segments()).all(|(x, y)| segment_bits_equal(x, y))
}

fn segment_bits_equal(x: &Segment, y: &Segment) -> bool {
    let bits = |v: &[f32]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
    x.role() == y.role()
        && x.turn() == y.turn()
        && x.tokens() == y.tokens()
        && x.positions() == y.positions()
        && match (x.kv(), y.kv()) {
            (None, None) => true,
            (Some(a), Some(b)) => {
                a.len() == b.len()
                    && a.iter().zip(b).all(|(l, r)| bits(&l.keys) == bits(&r.keys) && bits(&l.values) == bits(&r.values))
            }
            _ => false,
        }
        && x.tail_logits().map(bits) == y.tail_logits().map(bits)
}

/// Largest absolute difference between two equally long vectors.
pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn outcome(suite: Suite, property: &str, passed: bool, detail: String) -> PropertyOutcome {
    PropertyOutcome {
        suite: suite.as_str(),
        property: property.to_owned(),
        passed,
        detail,
    }
}

fn random_tokens(rng: &mut ChaCha8Rng, len: usize) -> Vec<u32> {
    (0..len).map(|_| rng.random_range(0..256u32)).collect()
}

/// A main cache ending in the query of turn `turn`, built from random bytes.
pub fn random_main_cache(backend: &dyn ModelBackend, rng: &mut ChaCha8Rng, turn: u32, max_len: usize) -> Result<KvCache> {
    let mut cache = KvCache::new();
    let instr = rng.random_range(0..=max_len / 4);
    backend.prefill(&mut cache, SegmentSpec::new(SegmentRole::MainInstruction, 1, random_tokens(rng, instr)))?;
    for past in 1..turn {
        if cache.len() >= max_len / 2 {
            break;
        }
        for role in [SegmentRole::TurnQuery, SegmentRole::MainAnswer] {
            let n = rng.random_range(1..=max_len / 8);
            backend.prefill(&mut cache, SegmentSpec::new(role, past, random_tokens(rng, n)))?;
        }
    }
    let room = max_len.saturating_sub(cache.len()).max(1);
    let q = rng.random_range(1..=room);
    backend.prefill(&mut cache, SegmentSpec::new(SegmentRole::TurnQuery, turn, random_tokens(rng, q)))?;
    Ok(cache)
}

fn greedy(role: SegmentRole, turn: u32, stage: DecodeStage, max: usize) -> DecodeRequest<'static> {
    DecodeRequest::new(role, turn, stage).max_tokens(max)
}

// ---- cache algebra -----------------------------------------------------

fn cache_algebra(ops: &dyn CacheOps, opts: &VerifyOptions) -> Result<Vec<PropertyOutcome>> {
    let backend = ToyBackend::new(Default::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut evict_ok = 0;
    let mut length_ok = 0;
    let mut immutable_ok = 0;

    for case in 0..opts.cases {
        let turn = rng.random_range(1..=4);
        let main = random_main_cache(&backend, &mut rng, turn, 96)?;
        let cp = ops.checkpoint(&main, turn)?;
        let snapshot = cp.to_cache();
        let frozen = deep_copy(&snapshot)?;

        // evict identity
        let role = if case % 2 == 0 {
            SegmentRole::ClassifierInstruction
        } else {
            SegmentRole::SubtaskInstruction
        };
        let ilen = rng.random_range(0..=32);
        let (mut side, cost) = ops.branch(&cp, SegmentSpec::new(role, turn, random_tokens(&mut rng, ilen)), &backend)?;
        let branch_len_ok = side.len() == cp.len() + ilen && cost == ilen;
        let steps = rng.random_range(0..=6);
        backend.decode(&mut side, &greedy(SegmentRole::ClassifierOutput, turn, DecodeStage::MultiChoice, steps))?;
        let evicted = ops.evict_to_checkpoint(side, &cp);
        if evicted.as_ref().is_ok_and(|c| bitwise_equal(c, &snapshot)) {
            evict_ok += 1;
        }

        // length algebra through a full sub-task round and turn advance
        let (mut side, _) = ops.branch(
            &cp,
            SegmentSpec::new(SegmentRole::SubtaskInstruction, turn, random_tokens(&mut rng, 9)),
            &backend,
        )?;
        let olen = rng.random_range(1..=8);
        backend.decode(&mut side, &greedy(SegmentRole::SubtaskOutput, turn, DecodeStage::SubtaskOutput, olen))?;
        let out: Arc<Segment> = side.last_segment().cloned().expect("decoded output");
        let _ = ops.evict_to_checkpoint(side, &cp);
        let mode = if case % 3 == 0 {
            RetentionMode::Recompute
        } else {
            RetentionMode::PreservePositions
        };
        let (rolled, _) = ops.rollback(&cp, Some(&out), mode, &backend)?;
        let rollback_ok = rolled.len() == cp.len() + out.len();
        let mut scratch = rolled.clone();
        let alen = rng.random_range(1..=6);
        backend.decode(&mut scratch, &greedy(SegmentRole::MainAnswer, turn, DecodeStage::Answer, alen))?;
        let answer = scratch.last_segment().cloned();
        let qlen = rng.random_range(1..=6);
        let next = SegmentSpec::new(SegmentRole::TurnQuery, turn + 1, random_tokens(&mut rng, qlen));
        let (advanced, qcost) = ops.advance_turn(rolled.clone(), answer.clone(), Some(next), &backend)?;
        let advance_ok = advanced.len() == rolled.len() + answer.map_or(0, |a| a.len()) + qlen && qcost == qlen;
        if branch_len_ok && rollback_ok && advance_ok {
            length_ok += 1;
        }

        // the checkpoint survived all of the above untouched
        if bitwise_equal(&cp.to_cache(), &frozen) && cp.len() == frozen.len() {
            immutable_ok += 1;
        }
    }

    let n = opts.cases;
    Ok(vec![
        outcome(Suite::CacheAlgebra, "evict identity", evict_ok == n, format!("{evict_ok}/{n} cases")),
        outcome(Suite::CacheAlgebra, "checkpoint immutability", immutable_ok == n, format!("{immutable_ok}/{n} cases")),
        outcome(Suite::CacheAlgebra, "length algebra", length_ok == n, format!("{length_ok}/{n} cases")),
    ])
}

/// Copy that shares no allocation with the source.
fn deep_copy(cache: &KvCache) -> Result<KvCache> {
    let mut out = KvCache::new();
    for s in cache.segments() {
        let seg = Segment::new(
            s.role(),
            s.turn(),
            s.tokens().to_vec(),
            s.positions().to_vec(),
            s.kv().map(<[_]>::to_vec),
            s.tail_logits().map(<[f32]>::to_vec),
        )?;
        out.push(Arc::new(seg))?;
    }
    Ok(out)
}

// ---- router ------------------------------------------------------------

/// The sixteen yes/no assignments over the actionable kinds, in default
/// priority order.
pub fn verdict_vectors() -> Vec<[bool; 4]> {
    (0..16u8)
        .map(|bits| std::array::from_fn(|i| bits & (1 << i) != 0))
        .collect()
}

fn router_suite(ops: &dyn CacheOps) -> Result<Vec<PropertyOutcome>> {
    let backend = CountingBackend::new(Tokenizer::Whitespace);
    let order = PriorityOrder::default();
    let instructions: BTreeMap<SubTaskKind, String> = SubTaskKind::ACTIONABLE
        .iter()
        .map(|&k| (k, format!("is this a {k} request")))
        .collect();
    let mut main = KvCache::new();
    backend.prefill_text(&mut main, SegmentRole::MainInstruction, 1, "answer the last question")?;
    backend.prefill_text(&mut main, SegmentRole::TurnQuery, 1, "what is two plus two")?;
    let cp = ops.checkpoint(&main, 1)?;

    let mut seq_ok = 0;
    let mut bat_ok = 0;
    for vector in verdict_vectors() {
        let mut behavior = ScriptedBehavior::new();
        for (i, &kind) in order.kinds().iter().enumerate() {
            let a = if vector[i] { Answer::Yes } else { Answer::No };
            behavior.insert(1, DecodeStage::Classify(kind), a.as_output());
        }
        let first_yes = vector.iter().position(|&y| y);
        let expected = first_yes.map_or(SubTaskKind::None, |i| order.kinds()[i]);
        let env = ClassifierEnv {
            backend: &backend,
            ops,
            script: Some(&behavior),
            turn: 1,
        };
        let seq = router::classify_hierarchical(&cp, &order, &instructions, &env)?;
        if seq.selected == expected && seq.verdicts.len() == first_yes.map_or(4, |i| i + 1) {
            seq_ok += 1;
        }
        let bat = router::classify_batched(&cp, &order, &instructions, &env)?;
        if bat.selected == expected && bat.verdicts.len() == 4 {
            bat_ok += 1;
        }
    }
    let default_ok = order.kinds()
        == &[
            SubTaskKind::ApiCall,
            SubTaskKind::Math,
            SubTaskKind::QueryRewrite,
            SubTaskKind::ChatSummary,
        ];
    Ok(vec![
        outcome(Suite::Router, "sequential priority argmax", seq_ok == 16, format!("{seq_ok}/16 verdict vectors")),
        outcome(Suite::Router, "batched priority argmax", bat_ok == 16, format!("{bat_ok}/16 verdict vectors")),
        outcome(
            Suite::Router,
            "default priority order",
            default_ok,
            order.kinds().iter().map(|k| k.as_str()).collect::<Vec<_>>().join(" > "),
        ),
    ])
}

// ---- oracle ------------------------------------------------------------

/// A small random but valid script for sweeps.
pub fn random_script(rng: &mut ChaCha8Rng) -> ConversationScript {
    loop {
        let turns = rng.random_range(1..=24);
        let mut w: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
        w[4] += w[3]; // casual weight covers the summaries that close its runs
        let total: f64 = w.iter().sum();
        let mut profile = SyntheticProfile::new(turns, rng.random());
        profile.mix = MixRatios {
            query_rewrite: w[0] / total,
            math: w[1] / total,
            api_call: w[2] / total,
            chat_summary: w[3] / total,
            none: 0.0,
        };
        profile.mix.none = 1.0 - (profile.mix.query_rewrite + profile.mix.math + profile.mix.api_call + profile.mix.chat_summary);
        let mut range = |lo: usize, hi: usize| {
            let a = rng.random_range(lo..=hi);
            LengthRange(a, a + rng.random_range(0..=hi))
        };
        profile.lengths.query = range(1, 8);
        profile.lengths.answer = range(1, 20);
        profile.lengths.passage = range(0, 60);
        profile.lengths.reasoning = range(0, 12);
        profile.lengths.subtask_output = range(0, 8);
        profile.lengths.instruction = rng.random_bool(0.5).then(|| rng.random_range(0..=30));
        if let Ok(script) = generate_synthetic(&profile) {
            return script;
        }
    }
}

/// The four strategies of the oracle sweep, varied per script index.
pub fn sweep_configs(index: usize) -> [StrategyConfig; 4] {
    let retention = if index % 2 == 0 {
        RetentionMode::PreservePositions
    } else {
        RetentionMode::Recompute
    };
    [
        StrategyConfig::new(Strategy::Ciflex).with_retention(retention),
        StrategyConfig::new(Strategy::FullReload),
        StrategyConfig::new(Strategy::RecentReload).with_window(1 + index % 6),
        StrategyConfig::new(Strategy::Seamless),
    ]
}

fn oracle_suite(ops: &dyn CacheOps, opts: &VerifyOptions) -> Result<Vec<PropertyOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let mut matched = 0;
    let mut total = 0;
    let mut first_failure = None;
    for i in 0..opts.scripts {
        let script = random_script(&mut rng);
        let tokenizer = if i % 3 == 2 { Tokenizer::Byte } else { Tokenizer::Whitespace };
        let backend = CountingBackend::new(tokenizer);
        for cfg in sweep_configs(i) {
            total += 1;
            let report = run_conversation_with(&script, &cfg, &backend, ops, &mut MemorySink::default())?;
            let verdict = assert_engine_matches_oracle(&report.metrics, &oracle_counts(&script, &cfg, tokenizer));
            if verdict.is_match() {
                matched += 1;
            } else if first_failure.is_none() {
                first_failure = Some(format!("{} on {}: {verdict:?}", cfg.label(), script.meta.id));
            }
        }
    }
    let detail = match first_failure {
        None => format!("{matched}/{total} runs"),
        Some(f) => format!("{matched}/{total} runs; first divergence {f}"),
    };
    Ok(vec![outcome(Suite::Oracle, "engine matches oracle", matched == total, detail)])
}

// ---- toy ---------------------------------------------------------------

fn toy_suite(ops: &dyn CacheOps, opts: &VerifyOptions) -> Result<Vec<PropertyOutcome>> {
    let backend = ToyBackend::new(Default::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x70e);
    let tol = 1e-5;

    // chunked prefill
    let stream = random_tokens(&mut rng, 256);
    let mut whole = KvCache::new();
    backend.prefill(&mut whole, SegmentSpec::new(SegmentRole::TurnQuery, 1, stream.clone()))?;
    let reference = whole.tail_logits().expect("logits").to_vec();
    let chunkings = 20;
    let mut chunk_worst = 0.0f32;
    for _ in 0..chunkings {
        let mut cache = KvCache::new();
        let mut at = 0;
        while at < stream.len() {
            let n = rng.random_range(1..=64).min(stream.len() - at);
            backend.prefill(&mut cache, SegmentSpec::new(SegmentRole::TurnQuery, 1, stream[at..at + n].to_vec()))?;
            at += n;
        }
        chunk_worst = chunk_worst.max(max_abs_diff(cache.tail_logits().expect("logits"), &reference));
    }

    // empty instruction + recompute rollback against a from-scratch prefill
    let contexts = 50;
    let mut roll_worst = 0.0f32;
    for _ in 0..contexts {
        let main = random_main_cache(&backend, &mut rng, 2, 480)?;
        let cp: Checkpoint = ops.checkpoint(&main, 2)?;
        let (mut side, _) = ops.branch(&cp, SegmentSpec::new(SegmentRole::SubtaskInstruction, 2, vec![]), &backend)?;
        let n = rng.random_range(1..=16);
        backend.decode(&mut side, &greedy(SegmentRole::SubtaskOutput, 2, DecodeStage::SubtaskOutput, n))?;
        let out = side.last_segment().cloned().expect("decoded output");
        let _ = ops.evict_to_checkpoint(side, &cp);
        let (rolled, _) = ops.rollback(&cp, Some(&out), RetentionMode::Recompute, &backend)?;

        let all: Vec<u32> = main
            .segments()
            .iter()
            .flat_map(|s| s.tokens().iter().copied())
            .chain(out.tokens().iter().copied())
            .collect();
        let mut fresh = KvCache::new();
        backend.prefill(&mut fresh, SegmentSpec::new(SegmentRole::TurnQuery, 1, all))?;
        roll_worst = roll_worst.max(max_abs_diff(
            rolled.tail_logits().expect("logits"),
            fresh.tail_logits().expect("logits"),
        ));
    }

    // seed determinism
    let twin = ToyBackend::new(Default::default())?;
    let prompt = crate::tokenizer::Tokenizer::Byte.encode("the couch is blue");
    let run = |b: &ToyBackend| -> Result<Vec<u32>> {
        let mut c = KvCache::new();
        b.prefill(&mut c, SegmentSpec::new(SegmentRole::TurnQuery, 1, prompt.clone()))?;
        Ok(b.decode(&mut c, &greedy(SegmentRole::MainAnswer, 1, DecodeStage::Answer, 24))?.tokens)
    };
    let same = run(&backend)? == run(&twin)?;

    Ok(vec![
        outcome(
            Suite::Toy,
            "chunked prefill equivalence",
            chunk_worst <= tol,
            format!("{chunkings} chunkings, max abs diff {chunk_worst:e}"),
        ),
        outcome(
            Suite::Toy,
            "recompute rollback equivalence",
            roll_worst <= tol,
            format!("{contexts} contexts, max abs diff {roll_worst:e}"),
        ),
        outcome(Suite::Toy, "seed determinism", same, "identical greedy decodes".into()),
    ])
}

/// Fault injection for the verify command: eviction that leaves the side
/// path in place.
#[derive(Debug, Clone, Copy, Default)]
pub struct BrokenEvict<O>(pub O);

impl<O: CacheOps> CacheOps for BrokenEvict<O> {
    fn checkpoint(&self, main: &KvCache, turn: u32) -> Result<Checkpoint> {
        self.0.checkpoint(main, turn)
    }

    fn branch(&self, cp: &Checkpoint, instruction: SegmentSpec, backend: &dyn ModelBackend) -> Result<(KvCache, usize)> {
        self.0.branch(cp, instruction, backend)
    }

    fn evict_to_checkpoint(&self, side: KvCache, _cp: &Checkpoint) -> Result<KvCache> {
        Ok(side)
    }

    fn rollback(
        &self,
        cp: &Checkpoint,
        retained: Option<&Arc<Segment>>,
        mode: RetentionMode,
        backend: &dyn ModelBackend,
    ) -> Result<(KvCache, usize)> {
        self.0.rollback(cp, retained, mode, backend)
    }

    fn advance_turn(
        &self,
        rollback: KvCache,
        answer: Option<Arc<Segment>>,
        next_query: Option<SegmentSpec>,
        backend: &dyn ModelBackend,
    ) -> Result<(KvCache, usize)> {
        self.0.advance_turn(rollback, answer, next_query, backend)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::SegmentCacheOps;

    fn small() -> VerifyOptions {
        VerifyOptions {
            seed: 3,
            cases: 8,
            scripts: 6,
        }
    }

    #[test]
    fn suites_pass_on_standard_ops() {
        for outcome in run_suite(Suite::All, &SegmentCacheOps, &small()).unwrap() {
            assert!(outcome.passed, "{outcome:?}");
        }
    }

    #[test]
    fn broken_evict_is_caught() {
        let out = run_suite(Suite::CacheAlgebra, &BrokenEvict(SegmentCacheOps), &small()).unwrap();
        let evict = out.iter().find(|o| o.property == "evict identity").unwrap();
        assert!(!evict.passed);
    }

    #[test]
    fn sixteen_distinct_vectors() {
        let v = verdict_vectors();
        assert_eq!(v.len(), 16);
        let set: std::collections::BTreeSet<_> = v.into_iter().collect();
        assert_eq!(set.len(), 16);
    }

    #[test]
    fn suite_names() {
        assert_eq!("cache-algebra".parse::<Suite>().unwrap(), Suite::CacheAlgebra);
        assert!("everything".parse::<Suite>().is_err());
    }
}
