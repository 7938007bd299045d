use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sidepath::{
    run_conversation, CacheOps, CountingBackend, DecodeRequest, DecodeStage, KvCache, ModelBackend, SegmentCacheOps,
    SegmentRole, SegmentSpec, Strategy, StrategyConfig, ToyBackend,
};
use sidepath_bench::{byte_stream, paper_like_script, primed_cache};

fn strategies(c: &mut Criterion) {
    let script = paper_like_script();
    let backend = CountingBackend::default();
    let mut group = c.benchmark_group("paper_like_22");
    group.sample_size(20);
    for strategy in Strategy::ALL {
        let cfg = StrategyConfig::new(strategy);
        group.bench_with_input(BenchmarkId::from_parameter(strategy), &cfg, |b, cfg| {
            b.iter(|| run_conversation(black_box(&script), cfg, &backend).unwrap())
        });
    }
    group.finish();
}

fn toy_prefill(c: &mut Criterion) {
    let backend = ToyBackend::new(Default::default()).unwrap();
    let tokens = byte_stream(256);
    c.bench_function("toy_prefill_256", |b| {
        b.iter(|| {
            let mut cache = KvCache::new();
            backend
                .prefill(&mut cache, SegmentSpec::new(SegmentRole::TurnQuery, 1, black_box(tokens.clone())))
                .unwrap();
            cache
        })
    });
}

fn branch_evict(c: &mut Criterion) {
    let backend = ToyBackend::new(Default::default()).unwrap();
    let ops = SegmentCacheOps;
    let main = primed_cache(&backend, 256);
    let cp = ops.checkpoint(&main, 1).unwrap();
    let instruction = byte_stream(32);
    c.bench_function("toy_branch_decode_evict", |b| {
        b.iter(|| {
            let spec = SegmentSpec::new(SegmentRole::ClassifierInstruction, 1, instruction.clone());
            let (mut side, _) = ops.branch(&cp, spec, &backend).unwrap();
            let req = DecodeRequest::new(SegmentRole::ClassifierOutput, 1, DecodeStage::MultiChoice).max_tokens(4);
            backend.decode(&mut side, &req).unwrap();
            ops.evict_to_checkpoint(side, &cp).unwrap()
        })
    });
}

criterion_group!(benches, strategies, toy_prefill, branch_evict);
criterion_main!(benches);
