use std::collections::BTreeSet;
use std::sync::Arc;

use super::{
    ClassificationMode, MemorySink, SessionReport, Strategy, StrategyConfig, SummaryEntry,
    SummarySink, TurnRecord,
};
use crate::backend::{DecodeOutcome, DecodeRequest, DecodeStage, ModelBackend, ScriptedBehavior, SegmentSpec};
use crate::cache::{CacheOps, KvCache, Segment, SegmentCacheOps, SegmentRole};
use crate::error::{Error, Result, StageExt};
use crate::metrics::{ComparisonTable, CumulativeCurve, StageCost, TurnMetrics};
use crate::router::{
    self, parse_option_letter, parse_yes_no, ClassifierEnv, ClassifierVerdict, Routing, SubTaskKind,
};
use crate::script::{ConversationScript, TurnSpec};
use crate::tokenizer::Tokenizer;

/// Runs every turn of `script` with the standard cache operations, keeping
/// summaries in memory.
pub fn run_conversation(
    script: &ConversationScript,
    config: &StrategyConfig,
    backend: &dyn ModelBackend,
) -> Result<SessionReport> {
    run_conversation_with(script, config, backend, &SegmentCacheOps, &mut MemorySink::default())
}

pub fn run_conversation_with(
    script: &ConversationScript,
    config: &StrategyConfig,
    backend: &dyn ModelBackend,
    ops: &dyn CacheOps,
    sink: &mut dyn SummarySink,
) -> Result<SessionReport> {
    let issues = script.validate();
    if !issues.is_empty() {
        return Err(Error::Validation(issues));
    }
    config.validate()?;

    let mut session = Session {
        script,
        config,
        backend,
        ops,
        sink,
        behavior: ScriptedBehavior::from_script(script),
        tokenizer: backend.tokenizer(),
        main: KvCache::new(),
        turns: Vec::new(),
        metrics: Vec::new(),
        lengths: Vec::new(),
        context_turns: Vec::new(),
    };
    for t in 1..=script.turn_count() {
        session.run_turn(t)?;
    }
    Ok(session.finish())
}

/// Runs the same script under each configuration.
pub fn compare_strategies(
    script: &ConversationScript,
    configs: &[StrategyConfig],
    backend: &dyn ModelBackend,
) -> Result<ComparisonTable> {
    if configs.len() < 2 {
        return Err(Error::Precondition(format!(
            "comparison needs at least two strategies, got {}",
            configs.len()
        )));
    }
    let reports = configs
        .iter()
        .map(|c| run_conversation(script, c, backend))
        .collect::<Result<Vec<_>>>()?;
    Ok(ComparisonTable::from_reports(&reports))
}

struct Session<'a> {
    script: &'a ConversationScript,
    config: &'a StrategyConfig,
    backend: &'a dyn ModelBackend,
    ops: &'a dyn CacheOps,
    sink: &'a mut dyn SummarySink,
    behavior: ScriptedBehavior,
    tokenizer: Tokenizer,
    main: KvCache,
    turns: Vec<TurnRecord>,
    metrics: Vec<TurnMetrics>,
    lengths: Vec<usize>,
    context_turns: Vec<Vec<u32>>,
}

/// What a turn's sub-task produced.
struct SubtaskResult {
    output: Option<String>,
    retained: Option<Arc<Segment>>,
}

impl<'a> Session<'a> {
    fn spec(&self, role: SegmentRole, turn: u32, text: &str) -> SegmentSpec {
        SegmentSpec::from_text(role, turn, text, self.tokenizer)
    }

    fn prefill(&self, cache: &mut KvCache, role: SegmentRole, turn: u32, text: &str) -> Result<usize> {
        Ok(self.backend.prefill(cache, self.spec(role, turn, text))?.tokens)
    }

    fn decode(&self, cache: &mut KvCache, role: SegmentRole, turn: u32, stage: DecodeStage) -> Result<DecodeOutcome> {
        let req = DecodeRequest::new(role, turn, stage).scripted(self.behavior.lookup(turn, stage));
        self.backend.decode(cache, &req)
    }

    fn turn_spec(&self, t: u32) -> &'a TurnSpec {
        self.script.turn(t).expect("turn within script")
    }

    fn subtask_instruction(&self, kind: SubTaskKind) -> Result<&'a str> {
        self.script
            .subtask_instructions
            .get(&kind)
            .map(String::as_str)
            .ok_or(Error::MissingInstruction(kind))
    }

    fn classifier_instruction(&self, kind: SubTaskKind) -> Result<&'a str> {
        self.script
            .classifier_instructions
            .get(&kind)
            .map(String::as_str)
            .ok_or(Error::MissingInstruction(kind))
    }

    fn run_turn(&mut self, t: u32) -> Result<()> {
        let batched = self.config.classification_mode == ClassificationMode::Batched;
        let mut m = TurnMetrics::new(t, batched);
        let record = match self.config.strategy {
            Strategy::Ciflex => self.ciflex_turn(t, &mut m),
            Strategy::FullReload | Strategy::RecentReload => self.reload_turn(t, &mut m),
            Strategy::Seamless => self.seamless_turn(t, &mut m),
        }?;
        if record.selected_subtask == SubTaskKind::ChatSummary {
            self.sink.record(SummaryEntry {
                conversation: self.script.meta.id.clone(),
                turn: t,
                summary: record.subtask_output.clone().unwrap_or_default(),
            })?;
        }
        self.turns.push(record);
        self.metrics.push(m);
        Ok(())
    }

    fn retrieval_for(&self, t: u32, selected: SubTaskKind) -> Option<&'a str> {
        match selected {
            SubTaskKind::QueryRewrite => self.turn_spec(t).scripted_retrieval.as_deref(),
            _ => None,
        }
    }

    fn record(&self, t: u32, selected: SubTaskKind, retrieval: Option<&str>, output: Option<String>, answer: String) -> TurnRecord {
        TurnRecord {
            turn: t,
            query: self.turn_spec(t).query.clone(),
            retrieval: retrieval.map(str::to_owned),
            answer,
            selected_subtask: selected,
            subtask_output: output,
        }
    }

    fn note_context(&mut self, cache: &KvCache, t: u32) {
        let seen: BTreeSet<u32> = cache
            .segments()
            .iter()
            .filter(|s| s.role() != SegmentRole::MainInstruction && s.turn() < t)
            .map(|s| s.turn())
            .collect();
        self.context_turns.push(seen.into_iter().collect());
    }

    // ---- ciflex --------------------------------------------------------

    fn ciflex_turn(&mut self, t: u32, m: &mut TurnMetrics) -> Result<TurnRecord> {
        if t == 1 {
            let mut main = KvCache::new();
            let instr = self.prefill(&mut main, SegmentRole::MainInstruction, 1, &self.script.main_instruction);
            let query = self.prefill(&mut main, SegmentRole::TurnQuery, 1, &self.turn_spec(1).query);
            m.main_answer.prefill += instr.stage("prefill")? + query.stage("prefill")?;
            self.main = main;
        }
        let cp = self.ops.checkpoint(&self.main, t).stage("checkpoint")?;
        let env = ClassifierEnv {
            backend: self.backend,
            ops: self.ops,
            script: Some(&self.behavior),
            turn: t,
        };

        let order = &self.config.priority;
        let instructions = &self.script.classifier_instructions;
        let selected = match self.config.classification_mode {
            ClassificationMode::Hierarchical => {
                note_routing(m, router::classify_hierarchical(&cp, order, instructions, &env)?)
            }
            ClassificationMode::Batched => {
                note_routing(m, router::classify_batched(&cp, order, instructions, &env)?)
            }
            ClassificationMode::Multichoice => {
                let mc = router::classify_multichoice(&cp, &self.script.multichoice_instruction, &env)?;
                m.record_classifier(StageCost::new(mc.prefill_cost, mc.generation_cost));
                mc.selected
            }
        };

        let mut sub = SubtaskResult {
            output: None,
            retained: None,
        };
        if selected.is_actionable() {
            let spec = self.spec(SegmentRole::SubtaskInstruction, t, self.subtask_instruction(selected)?);
            let (mut side, cost) = self.ops.branch(&cp, spec, self.backend).stage("subtask")?;
            m.subtask.prefill += cost;
            let reasoning = self
                .decode(&mut side, SegmentRole::SubtaskReasoning, t, DecodeStage::SubtaskReasoning)
                .stage("subtask")?;
            let out = self
                .decode(&mut side, SegmentRole::SubtaskOutput, t, DecodeStage::SubtaskOutput)
                .stage("subtask")?;
            m.subtask.generated += reasoning.tokens.len() + out.tokens.len();
            if selected.retains_output() && !out.tokens.is_empty() {
                sub.retained = side.last_segment().cloned();
            }
            sub.output = Some(out.text);
            self.ops.evict_to_checkpoint(side, &cp).stage("subtask")?;
        }

        let (mut main, cost) = self
            .ops
            .rollback(&cp, sub.retained.as_ref(), self.config.retention_mode, self.backend)?;
        m.subtask.prefill += cost;

        let retrieval = self.retrieval_for(t, selected);
        if let Some(r) = retrieval {
            m.main_answer.prefill += self
                .prefill(&mut main, SegmentRole::RetrievalContext, t, r)
                .stage("retrieval")?;
        }
        self.note_context(&main, t);

        let mut scratch = main.clone();
        let answer = self
            .decode(&mut scratch, SegmentRole::MainAnswer, t, DecodeStage::Answer)
            .stage("answer")?;
        m.main_answer.generated += answer.tokens.len();
        let answer_segment = if answer.tokens.is_empty() {
            None
        } else {
            scratch.last_segment().cloned()
        };

        let next = self
            .script
            .turn(t + 1)
            .map(|spec| self.spec(SegmentRole::TurnQuery, t + 1, &spec.query));
        let (main, cost) = self.ops.advance_turn(main, answer_segment, next, self.backend)?;
        m.turn_update.prefill += cost;
        self.lengths.push(main.len());
        self.main = main;
        Ok(self.record(t, selected, retrieval, sub.output, answer.text))
    }

    // ---- full and recent re-load ---------------------------------------

    /// Fresh cache holding the main instruction, the visible history and the
    /// current query.
    fn reload_context(&self, t: u32) -> Result<(KvCache, usize)> {
        let first = match self.config.strategy {
            Strategy::RecentReload => t.saturating_sub(self.config.recent_window as u32).max(1),
            _ => 1,
        };
        let mut cache = KvCache::new();
        let mut cost = self.prefill(&mut cache, SegmentRole::MainInstruction, t, &self.script.main_instruction)?;
        for past in &self.turns[(first - 1) as usize..] {
            let j = past.turn;
            cost += self.prefill(&mut cache, SegmentRole::TurnQuery, j, &past.query)?;
            if let Some(r) = &past.retrieval {
                cost += self.prefill(&mut cache, SegmentRole::RetrievalContext, j, r)?;
            }
            cost += self.prefill(&mut cache, SegmentRole::MainAnswer, j, &past.answer)?;
        }
        cost += self.prefill(&mut cache, SegmentRole::TurnQuery, t, &self.turn_spec(t).query)?;
        Ok((cache, cost))
    }

    fn reload_verdict(&self, t: u32, kind: SubTaskKind) -> Result<ClassifierVerdict> {
        let (mut cache, mut prefill) = self.reload_context(t)?;
        prefill += self.prefill(&mut cache, SegmentRole::ClassifierInstruction, t, self.classifier_instruction(kind)?)?;
        let out = self.decode(&mut cache, SegmentRole::ClassifierOutput, t, DecodeStage::Classify(kind))?;
        let answer = parse_yes_no(&out.text).ok_or_else(|| Error::ClassificationFormat {
            kind: kind.to_string(),
            output: out.text.clone(),
        })?;
        Ok(ClassifierVerdict {
            kind,
            answer,
            prefill_cost: prefill,
            generation_cost: out.tokens.len(),
        })
    }

    fn reload_turn(&mut self, t: u32, m: &mut TurnMetrics) -> Result<TurnRecord> {
        let order = &self.config.priority;
        let selected = match self.config.classification_mode {
            ClassificationMode::Hierarchical => {
                let routing = router::select_hierarchical(order, |k| self.reload_verdict(t, k)).stage("classify")?;
                note_routing(m, routing)
            }
            ClassificationMode::Batched => {
                let verdicts = order
                    .kinds()
                    .iter()
                    .map(|&k| self.reload_verdict(t, k))
                    .collect::<Result<Vec<_>>>()
                    .stage("classify")?;
                note_routing(m, router::select_batched(order, verdicts))
            }
            ClassificationMode::Multichoice => {
                let (mut cache, mut prefill) = self.reload_context(t)?;
                prefill += self.prefill(
                    &mut cache,
                    SegmentRole::ClassifierInstruction,
                    t,
                    &self.script.multichoice_instruction,
                )?;
                let out = self
                    .decode(&mut cache, SegmentRole::ClassifierOutput, t, DecodeStage::MultiChoice)
                    .stage("classify")?;
                m.record_classifier(StageCost::new(prefill, out.tokens.len()));
                multichoice_kind(&out.text)?
            }
        };

        let mut output = None;
        if selected.is_actionable() {
            let (mut cache, mut prefill) = self.reload_context(t)?;
            prefill += self.prefill(&mut cache, SegmentRole::SubtaskInstruction, t, self.subtask_instruction(selected)?)?;
            let reasoning = self
                .decode(&mut cache, SegmentRole::SubtaskReasoning, t, DecodeStage::SubtaskReasoning)
                .stage("subtask")?;
            let out = self
                .decode(&mut cache, SegmentRole::SubtaskOutput, t, DecodeStage::SubtaskOutput)
                .stage("subtask")?;
            m.subtask = StageCost::new(prefill, reasoning.tokens.len() + out.tokens.len());
            output = Some(out.text);
        }

        let (mut cache, mut prefill) = self.reload_context(t)?;
        if selected.retains_output() {
            if let Some(o) = &output {
                prefill += self.prefill(&mut cache, SegmentRole::SubtaskOutput, t, o)?;
            }
        }
        let retrieval = self.retrieval_for(t, selected);
        if let Some(r) = retrieval {
            prefill += self.prefill(&mut cache, SegmentRole::RetrievalContext, t, r)?;
        }
        self.note_context(&cache, t);
        let answer = self
            .decode(&mut cache, SegmentRole::MainAnswer, t, DecodeStage::Answer)
            .stage("answer")?;
        m.main_answer = StageCost::new(prefill, answer.tokens.len());
        self.lengths.push(cache.len());
        self.main = cache;
        Ok(self.record(t, selected, retrieval, output, answer.text))
    }

    // ---- seamless ------------------------------------------------------

    fn seamless_turn(&mut self, t: u32, m: &mut TurnMetrics) -> Result<TurnRecord> {
        let mut main = std::mem::take(&mut self.main);
        if t == 1 {
            m.main_answer.prefill += self.prefill(&mut main, SegmentRole::MainInstruction, 1, &self.script.main_instruction)?;
            m.main_answer.prefill += self.prefill(&mut main, SegmentRole::TurnQuery, 1, &self.turn_spec(1).query)?;
        }

        let selected = match self.config.classification_mode {
            ClassificationMode::Multichoice => {
                let prefill = self.prefill(
                    &mut main,
                    SegmentRole::ClassifierInstruction,
                    t,
                    &self.script.multichoice_instruction,
                )?;
                let out = self
                    .decode(&mut main, SegmentRole::ClassifierOutput, t, DecodeStage::MultiChoice)
                    .stage("classify")?;
                m.record_classifier(StageCost::new(prefill, out.tokens.len()));
                multichoice_kind(&out.text)?
            }
            ClassificationMode::Hierarchical => {
                let routing = router::select_hierarchical(&self.config.priority, |kind| {
                    let prefill = self.prefill(
                        &mut main,
                        SegmentRole::ClassifierInstruction,
                        t,
                        self.classifier_instruction(kind)?,
                    )?;
                    let out = self.decode(&mut main, SegmentRole::ClassifierOutput, t, DecodeStage::Classify(kind))?;
                    let answer = parse_yes_no(&out.text).ok_or_else(|| Error::ClassificationFormat {
                        kind: kind.to_string(),
                        output: out.text.clone(),
                    })?;
                    Ok(ClassifierVerdict {
                        kind,
                        answer,
                        prefill_cost: prefill,
                        generation_cost: out.tokens.len(),
                    })
                })
                .stage("classify")?;
                note_routing(m, routing)
            }
            ClassificationMode::Batched => unreachable!("rejected by StrategyConfig::validate"),
        };

        let mut output = None;
        if selected.is_actionable() {
            m.subtask.prefill += self
                .prefill(&mut main, SegmentRole::SubtaskInstruction, t, self.subtask_instruction(selected)?)
                .stage("subtask")?;
            let reasoning = self
                .decode(&mut main, SegmentRole::SubtaskReasoning, t, DecodeStage::SubtaskReasoning)
                .stage("subtask")?;
            let out = self
                .decode(&mut main, SegmentRole::SubtaskOutput, t, DecodeStage::SubtaskOutput)
                .stage("subtask")?;
            m.subtask.generated += reasoning.tokens.len() + out.tokens.len();
            output = Some(out.text);
        }

        let retrieval = self.retrieval_for(t, selected);
        if let Some(r) = retrieval {
            m.main_answer.prefill += self.prefill(&mut main, SegmentRole::RetrievalContext, t, r)?;
        }
        self.note_context(&main, t);
        let answer = self
            .decode(&mut main, SegmentRole::MainAnswer, t, DecodeStage::Answer)
            .stage("answer")?;
        m.main_answer.generated += answer.tokens.len();

        if let Some(next) = self.script.turn(t + 1) {
            m.turn_update.prefill += self
                .prefill(&mut main, SegmentRole::TurnQuery, t + 1, &next.query)
                .stage("advance-turn")?;
        }
        self.lengths.push(main.len());
        self.main = main;
        Ok(self.record(t, selected, retrieval, output, answer.text))
    }

    fn finish(self) -> SessionReport {
        SessionReport {
            script_id: self.script.meta.id.clone(),
            strategy: self.config.label(),
            config: self.config.clone(),
            backend: self.backend.name().to_owned(),
            tokenizer: self.tokenizer.name().to_owned(),
            cumulative: CumulativeCurve::from_metrics(&self.metrics),
            turns: self.turns,
            metrics: self.metrics,
            main_cache_lengths: self.lengths,
            context_turns: self.context_turns,
            final_cache: self.main.summaries(),
        }
    }
}

fn note_routing(m: &mut TurnMetrics, routing: Routing) -> SubTaskKind {
    for v in &routing.verdicts {
        m.record_classifier(StageCost::new(v.prefill_cost, v.generation_cost));
    }
    routing.selected
}

fn multichoice_kind(text: &str) -> Result<SubTaskKind> {
    parse_option_letter(text).ok_or_else(|| Error::ClassificationFormat {
        kind: "multichoice".into(),
        output: text.to_owned(),
    })
}
