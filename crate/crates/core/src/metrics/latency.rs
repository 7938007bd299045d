use serde::{Deserialize, Serialize};

use super::{StageCost, TurnMetrics};
use crate::error::{Error, Result};

/// Throughput of the modeled device, in tokens per second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub prefill_tps: f64,
    pub decode_tps: f64,
}

impl Calibration {
    /// Decoding fifty times slower than prefill per token.
    pub fn edge_like() -> Self {
        Self {
            prefill_tps: 500.0,
            decode_tps: 10.0,
        }
    }

    fn seconds(&self, cost: StageCost) -> f64 {
        cost.prefill as f64 / self.prefill_tps + cost.generated as f64 / self.decode_tps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurnLatency {
    pub turn: u32,
    pub classification: f64,
    pub subtask: f64,
    pub main_answer: f64,
    pub turn_update: f64,
    pub total: f64,
}

/// Two-rate linear time model. Concurrent classifier branches cost the
/// slowest branch; sequential ones cost their sum.
pub fn latency_proxy(metrics: &[TurnMetrics], cal: Calibration) -> Result<Vec<TurnLatency>> {
    let ok = |r: f64| r.is_finite() && r > 0.0;
    if !ok(cal.prefill_tps) || !ok(cal.decode_tps) {
        return Err(Error::Config(format!(
            "token rates must be positive, got prefill {} decode {}",
            cal.prefill_tps, cal.decode_tps
        )));
    }
    Ok(metrics
        .iter()
        .map(|m| {
            let branches = m.classifier_branches.iter().map(|&b| cal.seconds(b));
            let classification = if m.classifier_branches.is_empty() {
                cal.seconds(m.classification)
            } else if m.batched {
                branches.fold(0.0, f64::max)
            } else {
                branches.sum()
            };
            let subtask = cal.seconds(m.subtask);
            let main_answer = cal.seconds(m.main_answer);
            let turn_update = cal.seconds(m.turn_update);
            TurnLatency {
                turn: m.turn,
                classification,
                subtask,
                main_answer,
                turn_update,
                total: classification + subtask + main_answer + turn_update,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn turn(batched: bool) -> TurnMetrics {
        let mut m = TurnMetrics::new(1, batched);
        for _ in 0..4 {
            m.record_classifier(StageCost::new(100, 1));
        }
        m
    }

    #[test]
    fn zero_tokens_zero_seconds() {
        let l = latency_proxy(&[TurnMetrics::new(1, false)], Calibration::edge_like()).unwrap();
        assert_eq!(l[0].total, 0.0);
    }

    #[test]
    fn batched_takes_max() {
        let cal = Calibration::edge_like();
        let seq = latency_proxy(&[turn(false)], cal).unwrap()[0].classification;
        let bat = latency_proxy(&[turn(true)], cal).unwrap()[0].classification;
        assert!((bat * 4.0 - seq).abs() < 1e-12);
    }

    #[test]
    fn rates_must_be_positive() {
        let bad = Calibration {
            prefill_tps: 0.0,
            decode_tps: 1.0,
        };
        assert!(latency_proxy(&[], bad).is_err());
    }
}
