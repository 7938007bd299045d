use serde::{Deserialize, Serialize};

use super::{Stage, StageCost};
use crate::error::Result;
use crate::orchestrator::SessionReport;

/// One line of the delimiter-separated comparison export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub turn: u32,
    pub strategy: String,
    /// A stage name or `total`.
    pub stage: String,
    pub prefill: usize,
    pub generated: usize,
    pub cum_prefill: usize,
    pub cum_generated: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyTotals {
    pub strategy: String,
    pub prefill: usize,
    pub generated: usize,
    pub classification_prefill: usize,
    pub final_cache_length: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub script_id: String,
    pub strategies: Vec<String>,
    pub rows: Vec<ComparisonRow>,
    pub totals: Vec<StrategyTotals>,
    /// Whether every strategy produced the same turn records.
    pub transcripts_match: bool,
}

impl ComparisonTable {
    pub fn from_reports(reports: &[SessionReport]) -> Self {
        let mut rows = Vec::new();
        let mut totals = Vec::new();
        for report in reports {
            let mut cum = [StageCost::default(); 4];
            let mut cum_total = StageCost::default();
            for m in &report.metrics {
                for (i, stage) in Stage::ALL.into_iter().enumerate() {
                    let c = m.stage(stage);
                    cum[i] += c;
                    rows.push(row(m.turn, &report.strategy, stage.as_str(), c, cum[i]));
                }
                cum_total += m.total();
                rows.push(row(m.turn, &report.strategy, "total", m.total(), cum_total));
            }
            let last = report.cumulative.last();
            totals.push(StrategyTotals {
                strategy: report.strategy.clone(),
                prefill: last.map_or(0, |p| p.prefill),
                generated: last.map_or(0, |p| p.generated),
                classification_prefill: last.map_or(0, |p| p.classification_prefill),
                final_cache_length: report.main_cache_lengths.last().copied().unwrap_or(0),
            });
        }
        let transcripts_match = reports.windows(2).all(|w| w[0].turns == w[1].turns);
        Self {
            script_id: reports.first().map(|r| r.script_id.clone()).unwrap_or_default(),
            strategies: reports.iter().map(|r| r.strategy.clone()).collect(),
            rows,
            totals,
            transcripts_match,
        }
    }

    /// Rows for one strategy and stage, in turn order.
    pub fn series<'a>(&'a self, strategy: &'a str, stage: &'a str) -> impl Iterator<Item = &'a ComparisonRow> + 'a {
        self.rows
            .iter()
            .filter(move |r| r.strategy == strategy && r.stage == stage)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "turn",
            "strategy",
            "stage",
            "prefill",
            "generated",
            "cum_prefill",
            "cum_generated",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.turn.to_string(),
                r.strategy.clone(),
                r.stage.clone(),
                r.prefill.to_string(),
                r.generated.to_string(),
                r.cum_prefill.to_string(),
                r.cum_generated.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn row(turn: u32, strategy: &str, stage: &str, c: StageCost, cum: StageCost) -> ComparisonRow {
    ComparisonRow {
        turn,
        strategy: strategy.to_owned(),
        stage: stage.to_owned(),
        prefill: c.prefill,
        generated: c.generated,
        cum_prefill: cum.prefill,
        cum_generated: cum.generated,
    }
}
