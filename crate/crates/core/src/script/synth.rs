use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::templates;
use super::{ConversationScript, ScriptMeta, TurnSpec, SCRIPT_VERSION};
use crate::error::{Error, Result};
use crate::router::{Answer, PriorityOrder, SubTaskKind};

/// Inclusive word-count range, written `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthRange(pub usize, pub usize);

impl LengthRange {
    fn sample(self, rng: &mut ChaCha8Rng) -> usize {
        rng.random_range(self.0..=self.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixRatios {
    pub query_rewrite: f64,
    pub math: f64,
    pub api_call: f64,
    pub chat_summary: f64,
    pub none: f64,
}

impl Default for MixRatios {
    fn default() -> Self {
        Self {
            query_rewrite: 0.4,
            math: 0.18,
            api_call: 0.14,
            chat_summary: 0.05,
            none: 0.23,
        }
    }
}

impl MixRatios {
    pub fn get(&self, kind: SubTaskKind) -> f64 {
        match kind {
            SubTaskKind::QueryRewrite => self.query_rewrite,
            SubTaskKind::Math => self.math,
            SubTaskKind::ApiCall => self.api_call,
            SubTaskKind::ChatSummary => self.chat_summary,
            SubTaskKind::None => self.none,
        }
    }

    pub fn casual_only() -> Self {
        Self {
            query_rewrite: 0.0,
            math: 0.0,
            api_call: 0.0,
            chat_summary: 0.0,
            none: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileLengths {
    pub query: LengthRange,
    pub answer: LengthRange,
    pub passage: LengthRange,
    pub reasoning: LengthRange,
    pub subtask_output: LengthRange,
    /// When set, every instruction is filler of this many words instead of
    /// the bundled templates.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instruction: Option<usize>,
}

impl Default for ProfileLengths {
    fn default() -> Self {
        Self {
            query: LengthRange(8, 16),
            answer: LengthRange(130, 170),
            passage: LengthRange(1400, 1600),
            reasoning: LengthRange(20, 40),
            subtask_output: LengthRange(6, 12),
            instruction: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticProfile {
    #[serde(default = "default_name")]
    pub name: String,
    pub turn_count: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mix: MixRatios,
    #[serde(default)]
    pub lengths: ProfileLengths,
}

fn default_name() -> String {
    "synthetic".into()
}

impl SyntheticProfile {
    pub fn new(turn_count: usize, seed: u64) -> Self {
        Self {
            name: default_name(),
            turn_count,
            seed,
            mix: MixRatios::default(),
            lengths: ProfileLengths::default(),
        }
    }

    /// The bundled 22-turn profile.
    pub fn paper_like() -> Self {
        Self {
            name: "paper-like".into(),
            ..Self::new(22, 1)
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let p: Self = toml::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.turn_count == 0 {
            return Err(Error::Profile("turn_count must be at least 1".into()));
        }
        let ratios: Vec<f64> = SubTaskKind::ALL.iter().map(|&k| self.mix.get(k)).collect();
        if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::Profile("mix ratios must be non-negative".into()));
        }
        let sum: f64 = ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Profile(format!("mix ratios sum to {sum}, expected 1")));
        }
        let l = &self.lengths;
        for (name, r) in [
            ("query", l.query),
            ("answer", l.answer),
            ("passage", l.passage),
            ("reasoning", l.reasoning),
            ("subtask_output", l.subtask_output),
        ] {
            if r.0 > r.1 {
                return Err(Error::Profile(format!("lengths.{name}: min exceeds max")));
            }
        }
        if l.query.0 == 0 || l.answer.0 == 0 {
            return Err(Error::Profile("queries and answers need at least one word".into()));
        }
        Ok(())
    }

    /// Turn counts per kind by largest-remainder rounding.
    pub fn counts(&self) -> BTreeMap<SubTaskKind, usize> {
        let n = self.turn_count as f64;
        let mut counts = BTreeMap::new();
        let mut rem = Vec::new();
        for kind in SubTaskKind::ALL {
            let exact = self.mix.get(kind) * n;
            let floor = exact.floor();
            counts.insert(kind, floor as usize);
            rem.push((exact - floor, kind));
        }
        let assigned: usize = counts.values().sum();
        // stable sort keeps the fixed kind order on ties
        rem.sort_by(|a, b| b.0.total_cmp(&a.0));
        for &(_, kind) in rem.iter().take(self.turn_count.saturating_sub(assigned)) {
            *counts.get_mut(&kind).unwrap() += 1;
        }
        counts
    }
}

fn word(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(2..=7);
    (0..len).map(|_| (b'a' + rng.random_range(0..26u8)) as char).collect()
}

fn filler(rng: &mut ChaCha8Rng, words: usize) -> String {
    (0..words).map(|_| word(rng)).collect::<Vec<_>>().join(" ")
}

fn text(rng: &mut ChaCha8Rng, range: LengthRange) -> String {
    let words = range.sample(rng);
    filler(rng, words)
}

fn layout(counts: &BTreeMap<SubTaskKind, usize>, rng: &mut ChaCha8Rng) -> Result<Vec<SubTaskKind>> {
    let c = |k| counts[&k];
    let casual = c(SubTaskKind::None);
    let summaries = c(SubTaskKind::ChatSummary);
    if summaries > casual {
        return Err(Error::Profile(format!(
            "infeasible mix: {summaries} chat_summary turn(s) but only {casual} casual turn(s) to conclude"
        )));
    }

    let mut seq = vec![SubTaskKind::QueryRewrite; c(SubTaskKind::QueryRewrite)];
    seq.extend(std::iter::repeat_n(SubTaskKind::ApiCall, c(SubTaskKind::ApiCall)));
    if summaries == 0 {
        seq.extend(std::iter::repeat_n(SubTaskKind::None, casual));
    } else {
        for run in 0..summaries {
            let size = casual / summaries + usize::from(run < casual % summaries);
            seq.extend(std::iter::repeat_n(SubTaskKind::None, size));
            seq.push(SubTaskKind::ChatSummary);
        }
    }
    for _ in 0..c(SubTaskKind::Math) {
        let slots: Vec<usize> = (0..=seq.len())
            .filter(|&i| seq.get(i) != Some(&SubTaskKind::ChatSummary))
            .collect();
        let at = slots[rng.random_range(0..slots.len())];
        seq.insert(at, SubTaskKind::Math);
    }
    Ok(seq)
}

/// Deterministic conversation for a profile.
pub fn generate_synthetic(profile: &SyntheticProfile) -> Result<ConversationScript> {
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    let kinds = layout(&profile.counts(), &mut rng)?;
    let l = &profile.lengths;

    let (main_instruction, subtask_instructions, classifier_instructions, multichoice_instruction) =
        match l.instruction {
            Some(words) => {
                let mut per_kind = || -> BTreeMap<SubTaskKind, String> {
                    SubTaskKind::ACTIONABLE
                        .iter()
                        .map(|&k| (k, filler(&mut rng, words)))
                        .collect()
                };
                let sub = per_kind();
                let cls = per_kind();
                (filler(&mut rng, words), sub, cls, filler(&mut rng, words))
            }
            None => (
                templates::main_instruction(),
                SubTaskKind::ACTIONABLE
                    .iter()
                    .map(|&k| (k, templates::subtask_instruction(k)))
                    .collect(),
                SubTaskKind::ACTIONABLE
                    .iter()
                    .map(|&k| (k, templates::classifier_instruction(k)))
                    .collect(),
                templates::multichoice_instruction(),
            ),
        };

    let order = PriorityOrder::default();
    let mut turns = Vec::with_capacity(kinds.len());
    for gold in kinds {
        let query = text(&mut rng, l.query);
        let mut verdicts = BTreeMap::new();
        let rank = order.kinds().iter().position(|&k| k == gold);
        for (i, &kind) in order.kinds().iter().enumerate() {
            let answer = match rank {
                Some(r) if i == r => Answer::Yes,
                Some(r) if i > r && rng.random_bool(0.5) => Answer::Yes,
                _ => Answer::No,
            };
            verdicts.insert(kind, answer);
        }
        let (reasoning, output, retrieval) = match gold {
            SubTaskKind::Math => (
                Some(text(&mut rng, l.reasoning)),
                Some(text(&mut rng, l.subtask_output)),
                None,
            ),
            SubTaskKind::ApiCall | SubTaskKind::ChatSummary => {
                (None, Some(text(&mut rng, l.subtask_output)), None)
            }
            SubTaskKind::QueryRewrite => (
                None,
                Some(text(&mut rng, l.query)),
                Some(text(&mut rng, l.passage)),
            ),
            SubTaskKind::None => (None, None, None),
        };
        let answer = text(&mut rng, l.answer);
        turns.push(TurnSpec {
            query,
            gold_subtask: gold,
            scripted_verdicts: verdicts,
            scripted_multichoice: Some(gold.option_letter()),
            scripted_reasoning: reasoning,
            scripted_subtask_output: output,
            scripted_retrieval: retrieval,
            scripted_answer: answer,
        });
    }

    Ok(ConversationScript {
        version: SCRIPT_VERSION,
        meta: ScriptMeta {
            id: format!("{}-{}", profile.name, profile.turn_count),
            seed: Some(profile.seed),
            profile: Some(profile.name.clone()),
        },
        main_instruction,
        subtask_instructions,
        classifier_instructions,
        multichoice_instruction,
        turns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_like_counts() {
        let p = SyntheticProfile::new(22, 1);
        let c = p.counts();
        assert_eq!(c[&SubTaskKind::QueryRewrite], 9);
        assert_eq!(c[&SubTaskKind::Math], 4);
        assert_eq!(c[&SubTaskKind::ApiCall], 3);
        assert_eq!(c[&SubTaskKind::None], 5);
        assert_eq!(c[&SubTaskKind::ChatSummary], 1);
    }

    #[test]
    fn degenerate_single_casual_turn() {
        let mut p = SyntheticProfile::new(1, 0);
        p.mix = MixRatios::casual_only();
        let s = generate_synthetic(&p).unwrap();
        assert_eq!(s.turns.len(), 1);
        assert_eq!(s.turns[0].gold_subtask, SubTaskKind::None);
        assert!(s.validate().is_empty());
    }

    #[test]
    fn deterministic_per_seed() {
        let p = SyntheticProfile::new(22, 7);
        assert_eq!(generate_synthetic(&p).unwrap(), generate_synthetic(&p).unwrap());
        let q = SyntheticProfile::new(22, 8);
        assert_ne!(generate_synthetic(&p).unwrap(), generate_synthetic(&q).unwrap());
    }

    #[test]
    fn summaries_close_casual_runs() {
        for seed in 0..30 {
            let mut p = SyntheticProfile::new(30, seed);
            p.mix = MixRatios {
                query_rewrite: 0.2,
                math: 0.2,
                api_call: 0.1,
                chat_summary: 0.1,
                none: 0.4,
            };
            let s = generate_synthetic(&p).unwrap();
            assert!(s.validate().is_empty());
            for (i, t) in s.turns.iter().enumerate() {
                if t.gold_subtask == SubTaskKind::ChatSummary {
                    assert!(i > 0);
                    assert_eq!(s.turns[i - 1].gold_subtask, SubTaskKind::None);
                }
            }
        }
    }

    #[test]
    fn infeasible_summary_mix() {
        let mut p = SyntheticProfile::new(4, 0);
        p.mix = MixRatios {
            query_rewrite: 0.5,
            math: 0.0,
            api_call: 0.0,
            chat_summary: 0.5,
            none: 0.0,
        };
        assert!(matches!(generate_synthetic(&p), Err(Error::Profile(_))));
    }

    #[test]
    fn bad_ratios_rejected() {
        let mut p = SyntheticProfile::new(4, 0);
        p.mix.none = 0.9;
        assert!(p.validate().is_err());
    }

    #[test]
    fn toml_profile() {
        let p = SyntheticProfile::from_toml_str(
            "name = \"tiny\"\nturn_count = 3\nseed = 5\n[lengths]\nquery = [2, 3]\ninstruction = 10\n",
        )
        .unwrap();
        assert_eq!(p.lengths.query, LengthRange(2, 3));
        assert_eq!(p.lengths.answer, ProfileLengths::default().answer);
        let s = generate_synthetic(&p).unwrap();
        assert_eq!(s.meta.id, "tiny-3");
        assert!(s.classifier_instructions.values().all(|i| i.split(' ').count() == 10));
    }
}
