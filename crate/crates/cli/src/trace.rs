//! Seeded workload traces and the built-in diurnal intensity profile.

use std::f64::consts::PI;

use cagg_core::policy::GateKind;
use cagg_core::{IntensitySeries, ScopeId};
use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const TRACE_START: &str = "2026-01-01T00:00:00Z";
const PIPELINES: usize = 4;
const PULL_REQUESTS: usize = 40;
const MEAN_INTERARRIVAL_SECS: f64 = 120.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetSpec {
    pub scope: ScopeId,
    /// gCO2e.
    pub allocation: f64,
    pub soft_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub id: u32,
    /// Seconds after the trace start.
    pub arrival: u64,
    pub scope: ScopeId,
    pub gate_kind: GateKind,
    pub risk: f64,
    /// Tokens processed by each validation phase.
    pub tokens: u64,
    /// Actual emission relative to the estimate.
    pub actual_factor: f64,
    pub deferrable_by: u64,
    #[serde(default)]
    pub loop_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub start: DateTime<Utc>,
    pub budgets: Vec<BudgetSpec>,
    pub entries: Vec<TraceEntry>,
}

impl Trace {
    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let trace: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::InvalidTrace(format!("{}: {e}", path.display())))?;
        trace.validate()?;
        Ok(trace)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let mut last = 0;
        for e in &self.entries {
            if e.arrival < last {
                return Err(CliError::InvalidTrace(format!(
                    "entry {} arrives out of order",
                    e.id
                )));
            }
            last = e.arrival;
            if !(0.0..=1.0).contains(&e.risk) {
                return Err(CliError::InvalidTrace(format!(
                    "entry {} has risk {}",
                    e.id, e.risk
                )));
            }
            if !(e.actual_factor.is_finite() && e.actual_factor >= 0.0) {
                return Err(CliError::InvalidTrace(format!(
                    "entry {} has a negative actual_factor",
                    e.id
                )));
            }
        }
        Ok(())
    }
}

fn release() -> ScopeId {
    ScopeId::release("r1").expect("valid id")
}

fn pipeline(i: usize) -> ScopeId {
    ScopeId::pipeline(format!("p{i}"), Some(release())).expect("valid id")
}

fn pull_request(i: usize) -> ScopeId {
    ScopeId::pull_request(format!("pr-{i}"), Some(pipeline(i % PIPELINES))).expect("valid id")
}

pub fn default_budgets() -> Vec<BudgetSpec> {
    let mut budgets = vec![BudgetSpec {
        scope: release(),
        allocation: 4000.0,
        soft_threshold: 0.8,
    }];
    for i in 0..PIPELINES {
        budgets.push(BudgetSpec {
            scope: pipeline(i),
            allocation: 1200.0,
            soft_threshold: 0.8,
        });
    }
    for i in 0..PULL_REQUESTS {
        budgets.push(BudgetSpec {
            scope: pull_request(i),
            allocation: 150.0,
            soft_threshold: 0.8,
        });
    }
    budgets
}

/// A reproducible trace of `entries` gate arrivals.
///
/// Gate kinds are 70% PR validation, 20% pipeline stage, 10% release review.
/// Risk is uniform; token counts are log-uniform over [2e3, 2e5]; arrivals are
/// Poisson. A quarter of PR entries are regenerations of one of four
/// artifacts in that PR.
pub fn generate(seed: u64, entries: u32) -> Trace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaps = Exp::new(1.0 / MEAN_INTERARRIVAL_SECS).expect("positive rate");
    let mut clock = 0.0f64;
    let mut out = Vec::with_capacity(entries as usize);
    for id in 0..entries {
        clock += gaps.sample(&mut rng);
        let roll: f64 = rng.random();
        let (scope, gate_kind, deferrable_by) = if roll < 0.7 {
            (
                pull_request(rng.random_range(0..PULL_REQUESTS)),
                GateKind::PullRequestValidation,
                4 * 3600,
            )
        } else if roll < 0.9 {
            (
                pipeline(rng.random_range(0..PIPELINES)),
                GateKind::PipelineStage,
                2 * 3600,
            )
        } else {
            (release(), GateKind::ReleaseReview, 0)
        };
        let risk: f64 = rng.random();
        let tokens = 2e3f64 * 100f64.powf(rng.random::<f64>());
        let actual_factor = rng.random_range(0.8..1.2);
        let loop_id = (gate_kind == GateKind::PullRequestValidation && rng.random_bool(0.25))
            .then(|| format!("{}#a{}", scope.id(), rng.random_range(0..4)));
        out.push(TraceEntry {
            id,
            arrival: clock.round() as u64,
            scope,
            gate_kind,
            risk,
            tokens: tokens.round() as u64,
            actual_factor,
            deferrable_by,
            loop_id,
        });
    }
    Trace {
        start: TRACE_START.parse().expect("valid constant"),
        budgets: default_budgets(),
        entries: out,
    }
}

/// Three days of hourly grid intensity: an evening peak, a night trough and
/// a solar dip around midday.
pub fn diurnal_intensity() -> IntensitySeries {
    let values = (0..72)
        .map(|h| {
            let hour = (h % 24) as f64;
            let evening = 120.0 * (2.0 * PI * (hour - 19.0) / 24.0).cos();
            let solar = if (6.0..=18.0).contains(&hour) {
                110.0 * (PI * (hour - 6.0) / 12.0).sin()
            } else {
                0.0
            };
            ((320.0 + evening - solar) * 10.0).round() / 10.0
        })
        .collect();
    IntensitySeries::new(TRACE_START.parse().expect("valid constant"), 3600, values)
        .expect("valid profile")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn traces_are_reproducible() {
        assert_eq!(generate(7, 200), generate(7, 200));
        assert_ne!(generate(7, 50), generate(8, 50));
    }

    #[test]
    fn trace_shape() {
        let t = generate(3, 2000);
        t.validate().unwrap();
        let prs = t
            .entries
            .iter()
            .filter(|e| e.gate_kind == GateKind::PullRequestValidation)
            .count() as f64;
        assert!((prs / 2000.0 - 0.7).abs() < 0.05);
        assert!(t
            .entries
            .iter()
            .all(|e| (2_000..=200_000).contains(&e.tokens)));
        let regen = t.entries.iter().filter(|e| e.loop_id.is_some()).count() as f64;
        assert!((regen / prs - 0.25).abs() < 0.05);
        let span = t.entries.last().unwrap().arrival as f64;
        assert!((span / 2000.0 - 120.0).abs() < 15.0);
    }

    #[test]
    fn profile_is_positive_and_covers_three_days() {
        let s = diurnal_intensity();
        assert_eq!(s.coverage(), 72 * 3600);
        assert!(s.values().iter().all(|v| *v > 100.0 && *v < 500.0));
    }
}
