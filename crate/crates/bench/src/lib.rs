//! Shared inputs for the criterion benches.

use sidepath::{generate_synthetic, ConversationScript, KvCache, ModelBackend, SegmentRole, SegmentSpec, SyntheticProfile};

/// The bundled 22-turn synthetic conversation, regenerated in memory.
pub fn paper_like_script() -> ConversationScript {
    generate_synthetic(&SyntheticProfile::paper_like()).expect("bundled profile is valid")
}

/// Deterministic byte stream of length `n`.
pub fn byte_stream(n: usize) -> Vec<u32> {
    (0..n as u32).map(|i| (i.wrapping_mul(2_654_435_761) >> 24) & 0xff).collect()
}

/// Main cache holding an instruction and a query, ready to checkpoint at turn 1.
pub fn primed_cache(backend: &dyn ModelBackend, context: usize) -> KvCache {
    let mut cache = KvCache::new();
    let tokens = byte_stream(context);
    let (head, tail) = tokens.split_at(context / 2);
    backend
        .prefill(&mut cache, SegmentSpec::new(SegmentRole::MainInstruction, 1, head.to_vec()))
        .expect("prefill");
    backend
        .prefill(&mut cache, SegmentSpec::new(SegmentRole::TurnQuery, 1, tail.to_vec()))
        .expect("prefill");
    cache
}
