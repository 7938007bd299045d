use std::path::PathBuf;

use sidepath::orchestrator::{JsonlSink, MemorySink, SummaryEntry};
use sidepath::script::parse_and_validate;
use sidepath::{
    compare_strategies, generate_synthetic, load_and_validate, run_conversation, run_conversation_with, CacheOps,
    CountingBackend, Error, KvCache, ModelBackend, SegmentCacheOps, SegmentRole, SegmentSpec, Strategy,
    StrategyConfig, SubTaskKind, SyntheticProfile, Tokenizer,
};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

#[test]
fn cache_dump_matches_golden() {
    let backend = CountingBackend::new(Tokenizer::Whitespace);
    let ops = SegmentCacheOps;
    let mut main = KvCache::new();
    backend.prefill_text(&mut main, SegmentRole::MainInstruction, 1, "answer the last question briefly").unwrap();
    backend.prefill_text(&mut main, SegmentRole::TurnQuery, 1, "what is six times seven").unwrap();
    let cp = ops.checkpoint(&main, 1).unwrap();
    let spec = SegmentSpec::from_text(SegmentRole::SubtaskInstruction, 1, "compute it", Tokenizer::Whitespace);
    let (side, _) = ops.branch(&cp, spec, &backend).unwrap();
    let mut out = side.dump();
    out.push_str(&ops.evict_to_checkpoint(side, &cp).unwrap().dump());
    if std::env::var_os("SIDEPATH_BLESS").is_some() {
        std::fs::write(golden("cache_dump.txt"), &out).unwrap();
    }
    let expected = std::fs::read_to_string(golden("cache_dump.txt")).unwrap();
    assert_eq!(out, expected);
}

#[test]
fn bundled_fixture_is_generator_output() {
    let generated = generate_synthetic(&SyntheticProfile::paper_like()).unwrap().to_json_pretty();
    let on_disk = std::fs::read_to_string(fixture("paper-like-22.json")).unwrap();
    assert_eq!(generated, on_disk);

    let profile = SyntheticProfile::load(fixture("profiles/paper-like.toml")).unwrap();
    assert_eq!(generate_synthetic(&profile).unwrap().to_json_pretty(), on_disk);
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let script = load_and_validate(fixture("mixed-6.json")).unwrap();
    let backend = CountingBackend::new(Tokenizer::Whitespace);
    for strategy in Strategy::ALL {
        let cfg = StrategyConfig::new(strategy);
        let a = run_conversation(&script, &cfg, &backend).unwrap().to_json_pretty();
        let b = run_conversation(&script, &cfg, &backend).unwrap().to_json_pretty();
        assert_eq!(a, b, "{strategy}");
    }
    let configs: Vec<_> = Strategy::ALL.into_iter().map(StrategyConfig::new).collect();
    let t1 = compare_strategies(&script, &configs, &backend).unwrap().to_csv().unwrap();
    let t2 = compare_strategies(&script, &configs, &backend).unwrap().to_csv().unwrap();
    assert_eq!(t1, t2);
}

#[test]
fn strategies_agree_on_transcripts() {
    let script = load_and_validate(fixture("paper-like-22.json")).unwrap();
    let backend = CountingBackend::new(Tokenizer::Whitespace);
    let configs: Vec<_> = Strategy::ALL.into_iter().map(StrategyConfig::new).collect();
    let table = compare_strategies(&script, &configs, &backend).unwrap();
    assert!(table.transcripts_match);
    assert!(matches!(
        compare_strategies(&script, &configs[..1], &backend),
        Err(Error::Precondition(_))
    ));
}

#[test]
fn validation_lists_every_issue() {
    let text = std::fs::read_to_string(fixture("mixed-6.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["turns"][1]["scripted_retrieval"] = serde_json::Value::Null;
    v["turns"][2]["scripted_subtask_output"] = serde_json::Value::Null;
    v["turns"][4]["query"] = "  ".into();
    let err = parse_and_validate(&v.to_string()).unwrap_err();
    let Error::Validation(issues) = err else { panic!("expected validation error, got {err}") };
    let paths: Vec<_> = issues.iter().map(|i| i.path.as_str()).collect();
    assert_eq!(
        paths,
        ["turns[1].scripted_retrieval", "turns[2].scripted_subtask_output", "turns[4].query"]
    );
}

#[test]
fn malformed_json_is_an_error() {
    assert!(parse_and_validate("{\"version\": 1").is_err());
}

#[test]
fn summaries_go_to_the_sink_not_the_cache() {
    let script = load_and_validate(fixture("mixed-6.json")).unwrap();
    let summary_turns: Vec<u32> = script
        .turns
        .iter()
        .enumerate()
        .filter(|(_, t)| t.gold_subtask == SubTaskKind::ChatSummary)
        .map(|(i, _)| i as u32 + 1)
        .collect();
    assert!(!summary_turns.is_empty());

    let backend = CountingBackend::new(Tokenizer::Whitespace);
    let cfg = StrategyConfig::new(Strategy::Ciflex);
    let mut memory = MemorySink::default();
    let report = run_conversation_with(&script, &cfg, &backend, &SegmentCacheOps, &mut memory).unwrap();
    assert_eq!(memory.entries.iter().map(|e| e.turn).collect::<Vec<_>>(), summary_turns);
    assert_eq!(report.final_tokens_with_role(SegmentRole::SubtaskOutput), {
        script
            .turns
            .iter()
            .filter(|t| t.gold_subtask.retains_output())
            .map(|t| Tokenizer::Whitespace.count(t.scripted_subtask_output.as_deref().unwrap_or("")))
            .sum::<usize>()
    });

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("summaries.jsonl");
    for _ in 0..2 {
        let mut sink = JsonlSink::open(&path).unwrap();
        run_conversation_with(&script, &cfg, &backend, &SegmentCacheOps, &mut sink).unwrap();
    }
    let lines: Vec<SummaryEntry> = std::fs::read_to_string(&path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2 * summary_turns.len());
    assert_eq!(lines[0], memory.entries[0]);
    assert_eq!(lines[0].conversation, script.meta.id);
}

#[test]
fn cumulative_curves_are_monotone() {
    let script = load_and_validate(fixture("paper-like-22.json")).unwrap();
    let backend = CountingBackend::new(Tokenizer::Byte);
    for strategy in Strategy::ALL {
        let report = run_conversation(&script, &StrategyConfig::new(strategy), &backend).unwrap();
        assert!(report.cumulative.is_monotone(), "{strategy}");
        assert_eq!(report.turns.len(), 22);
    }
}
