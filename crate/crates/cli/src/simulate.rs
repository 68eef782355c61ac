//! Deterministic replay of a workload trace through the full engine under a
//! virtual clock, with an optional ungoverned baseline for comparison.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::sync::Arc;

use cagg_core::engine::{EngineSettings, WorkloadItem, WorkloadReport};
use cagg_core::orchestrator::{
    plan_max_depth, plan_validation, PhaseKind, RiskSignal, ValidationPlan, WorkSize,
};
use cagg_core::policy::{GateRequest, PolicyConfig, ReviewOutcome, ReviewResolution};
use cagg_core::{
    combined_assurance, Clock, Engine, GateDecision, IntensitySeries, Verdict, VirtualClock,
    WorkloadKind,
};
use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use crate::trace::{Trace, TraceEntry};
use crate::CliError;

/// Queued gate visit: (time, tiebreak, entry index, deferrable_by, first visit).
type Visit = (u64, u64, usize, u64, bool);

/// How escalations are resolved during replay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewMode {
    AutoApprove,
    AutoDeny,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub entries: usize,
    pub executed: usize,
    /// gCO2e.
    pub total_carbon: f64,
    /// kWh.
    pub total_energy: f64,
    /// Averaged over all entries; entries that never ran count as zero.
    pub mean_assurance: f64,
    /// Summed assurance per gram of CO2e.
    pub assurance_per_carbon: f64,
    /// First verdict each entry received.
    pub decisions: BTreeMap<String, usize>,
    pub deferred: usize,
    pub escalated: usize,
    pub denied: usize,
    pub ledger_records: usize,
    pub ledger_root: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    /// Baseline minus governed, gCO2e.
    pub carbon_saved: f64,
    /// Governed over baseline.
    pub carbon_ratio: f64,
    /// Governed minus baseline.
    pub assurance_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationOutput {
    pub governed: SimulationReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<SimulationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<Delta>,
}

#[derive(Debug, Default)]
struct Tally {
    executed: usize,
    carbon: f64,
    energy: f64,
    assurance: f64,
    decisions: BTreeMap<String, usize>,
    deferred: usize,
    escalated: usize,
    denied: usize,
}

impl Tally {
    fn report(self, entries: usize, engine: &Engine) -> SimulationReport {
        SimulationReport {
            entries,
            executed: self.executed,
            total_carbon: self.carbon,
            total_energy: self.energy,
            mean_assurance: if entries == 0 {
                0.0
            } else {
                self.assurance / entries as f64
            },
            assurance_per_carbon: if self.carbon > 0.0 {
                self.assurance / self.carbon
            } else {
                0.0
            },
            decisions: self.decisions,
            deferred: self.deferred,
            escalated: self.escalated,
            denied: self.denied,
            ledger_records: engine.ledger().len(),
            ledger_root: engine.ledger().root_hash(),
        }
    }
}

fn verdict_name(v: &Verdict) -> &'static str {
    match v {
        Verdict::Allow => "allow",
        Verdict::Downgrade { .. } => "downgrade",
        Verdict::Defer { .. } => "defer",
        Verdict::Escalate { .. } => "escalate",
        Verdict::Deny => "deny",
    }
}

fn at(trace: &Trace, offset: u64) -> DateTime<Utc> {
    trace.start + Duration::seconds(offset as i64)
}

fn plan_for(
    entry: &TraceEntry,
    policy: &PolicyConfig,
    intensity: f64,
    max_depth: bool,
) -> Result<ValidationPlan, CliError> {
    let mut params = policy.plan_params(intensity);
    params.light_work = WorkSize::Tokens(entry.tokens);
    params.deep_work = WorkSize::Tokens(entry.tokens);
    let risk = RiskSignal::manual(entry.risk).map_err(|e| CliError::InvalidTrace(e.to_string()))?;
    let plan = if max_depth {
        plan_max_depth(&policy.ladder, &params)
    } else {
        plan_validation(&risk, &policy.ladder, &params)
    };
    plan.map_err(|e| CliError::InfeasiblePolicy(e.to_string()))
}

/// Phases that actually run, with a downgrade applied to the deep phase.
fn executed_phases(plan: &ValidationPlan, downgrade: Option<&str>) -> Vec<(String, u64)> {
    plan.phases
        .iter()
        .map(|p| {
            let tier = match (p.kind, downgrade) {
                (PhaseKind::Deep, Some(lower)) => lower.to_string(),
                _ => p.tier.clone(),
            };
            let tokens = match p.work {
                WorkSize::Tokens(n) => n,
                WorkSize::Duration(_) => 0,
            };
            (tier, tokens)
        })
        .collect()
}

fn execute(
    engine: &Engine,
    policy: &PolicyConfig,
    entry: &TraceEntry,
    phases: &[(String, u64)],
    decision: Option<&GateDecision>,
    tally: &mut Tally,
) -> Result<(), CliError> {
    let kind = if entry.loop_id.is_some() {
        WorkloadKind::Regeneration
    } else {
        WorkloadKind::Inference
    };
    let items = phases
        .iter()
        .map(|(tier, tokens)| WorkloadItem {
            event_id: None,
            kind,
            tier: tier.clone(),
            tokens_in: (*tokens as f64 * entry.actual_factor).round() as u64,
            tokens_out: 0,
            duration: 0.0,
        })
        .collect();
    let report = match decision {
        Some(d) => WorkloadReport {
            reservation: d.reservation.clone(),
            scope: None,
            unbudgeted: false,
            items,
        },
        None => WorkloadReport {
            reservation: None,
            scope: Some(entry.scope.clone()),
            unbudgeted: true,
            items,
        },
    };
    let recorded = engine.record_event(&report).map_err(CliError::Engine)?;
    let distinct: BTreeSet<&str> = phases.iter().map(|(t, _)| t.as_str()).collect();
    let tiers: Vec<_> = distinct
        .iter()
        .filter_map(|t| policy.ladder.get(t))
        .collect();
    tally.assurance +=
        combined_assurance(tiers).map_err(|e| CliError::InfeasiblePolicy(e.to_string()))?;
    tally.carbon += recorded.carbon;
    tally.energy += recorded.energy;
    tally.executed += 1;
    Ok(())
}

fn new_engine(
    policy: &PolicyConfig,
    intensity: &IntensitySeries,
    start: DateTime<Utc>,
) -> Result<(Engine, Arc<VirtualClock>), CliError> {
    let clock = Arc::new(VirtualClock::new(start));
    let engine = Engine::in_memory(EngineSettings {
        policy: policy.clone(),
        policy_path: None,
        intensity: intensity.clone(),
        intensity_path: None,
        clock: clock.clone(),
    })
    .map_err(|e| CliError::InfeasiblePolicy(e.to_string()))?;
    Ok((engine, clock))
}

/// Resolve an escalation the way the configured reviewer would.
fn review(engine: &Engine, review_id: &str, mode: ReviewMode) -> Result<GateDecision, CliError> {
    let resolution = match mode {
        ReviewMode::AutoApprove => ReviewResolution {
            outcome: ReviewOutcome::Approve,
            approver: "simulator".into(),
            note: "auto-approved during replay".into(),
            extension: Some(1),
        },
        ReviewMode::AutoDeny => ReviewResolution {
            outcome: ReviewOutcome::Deny,
            approver: "simulator".into(),
            note: "auto-denied during replay".into(),
            extension: None,
        },
    };
    engine
        .resolve_review(review_id, &resolution)
        .map_err(CliError::Engine)
}

/// Upper bound on review rounds for one gate visit; each approval lifts one
/// rule, so a handful always suffices.
const MAX_REVIEW_ROUNDS: usize = 4;

pub fn run_governed(
    trace: &Trace,
    policy: &PolicyConfig,
    intensity: &IntensitySeries,
    mode: ReviewMode,
) -> Result<SimulationReport, CliError> {
    let (engine, clock) = new_engine(policy, intensity, trace.start)?;
    for b in &trace.budgets {
        engine
            .set_budget(b.scope.clone(), b.allocation, b.soft_threshold, None)
            .map_err(CliError::Engine)?;
    }
    let mut tally = Tally::default();
    let mut queue: BinaryHeap<Reverse<Visit>> = trace
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| Reverse((e.arrival, i as u64, i, e.deferrable_by, true)))
        .collect();
    let mut tiebreak = trace.entries.len() as u64;

    while let Some(Reverse((time, _, idx, deferrable_by, first))) = queue.pop() {
        let entry = &trace.entries[idx];
        clock.set(at(trace, time));
        let now_intensity = intensity.intensity_at(clock.now()).map_err(|_| {
            CliError::InfeasiblePolicy(format!("entry {} runs past the intensity trace", entry.id))
        })?;
        let plan = plan_for(entry, policy, now_intensity, false)?;
        let request = GateRequest {
            scope: entry.scope.clone(),
            gate_kind: entry.gate_kind,
            risk: RiskSignal::manual(entry.risk)
                .map_err(|e| CliError::InvalidTrace(e.to_string()))?,
            est_carbon: plan.est_carbon,
            deferrable_by,
            loop_id: entry.loop_id.clone(),
        };
        let mut decision = engine.check_gate(&request).map_err(CliError::Engine)?;
        if first {
            *tally
                .decisions
                .entry(verdict_name(&decision.verdict).to_string())
                .or_default() += 1;
        }
        let mut rounds = 0;
        while let Verdict::Escalate { review_id } = &decision.verdict {
            tally.escalated += 1;
            rounds += 1;
            if rounds > MAX_REVIEW_ROUNDS {
                return Err(CliError::InfeasiblePolicy(format!(
                    "entry {} kept escalating after {MAX_REVIEW_ROUNDS} reviews",
                    entry.id
                )));
            }
            decision = review(&engine, review_id, mode)?;
        }
        match &decision.verdict {
            Verdict::Allow | Verdict::Downgrade { .. } => {
                if let Some(loop_id) = &entry.loop_id {
                    engine
                        .loop_attempt(loop_id, &entry.scope)
                        .map_err(CliError::Engine)?;
                }
                let downgrade = match &decision.verdict {
                    Verdict::Downgrade { tier } => Some(tier.as_str()),
                    _ => None,
                };
                let phases = executed_phases(&plan, downgrade);
                execute(&engine, policy, entry, &phases, Some(&decision), &mut tally)?;
            }
            Verdict::Defer { until } => {
                tally.deferred += 1;
                let later = (*until - trace.start).num_seconds().max(time as i64 + 1) as u64;
                queue.push(Reverse((later, tiebreak, idx, 0, false)));
                tiebreak += 1;
            }
            Verdict::Deny => tally.denied += 1,
            Verdict::Escalate { .. } => unreachable!("escalations are resolved above"),
        }
    }
    if !engine.budgets().live_reservations().is_empty() {
        return Err(CliError::InfeasiblePolicy(
            "replay left reservations open".into(),
        ));
    }
    Ok(tally.report(trace.entries.len(), &engine))
}

/// Every entry runs at arrival with lightweight plus deep validation on the
/// top tier, without budgets or deferral.
pub fn run_baseline(
    trace: &Trace,
    policy: &PolicyConfig,
    intensity: &IntensitySeries,
) -> Result<SimulationReport, CliError> {
    let (engine, clock) = new_engine(policy, intensity, trace.start)?;
    let mut tally = Tally::default();
    for entry in &trace.entries {
        clock.set(at(trace, entry.arrival));
        let now_intensity = intensity.intensity_at(clock.now()).map_err(|_| {
            CliError::InfeasiblePolicy(format!("entry {} runs past the intensity trace", entry.id))
        })?;
        let plan = plan_for(entry, policy, now_intensity, true)?;
        *tally.decisions.entry("allow".to_string()).or_default() += 1;
        execute(
            &engine,
            policy,
            entry,
            &executed_phases(&plan, None),
            None,
            &mut tally,
        )?;
    }
    Ok(tally.report(trace.entries.len(), &engine))
}

pub fn simulate(
    trace: &Trace,
    policy: &PolicyConfig,
    intensity: &IntensitySeries,
    mode: ReviewMode,
    baseline: bool,
) -> Result<SimulationOutput, CliError> {
    trace.validate()?;
    let governed = run_governed(trace, policy, intensity, mode)?;
    if !baseline {
        return Ok(SimulationOutput {
            governed,
            baseline: None,
            delta: None,
        });
    }
    let base = run_baseline(trace, policy, intensity)?;
    let delta = Delta {
        carbon_saved: base.total_carbon - governed.total_carbon,
        carbon_ratio: if base.total_carbon > 0.0 {
            governed.total_carbon / base.total_carbon
        } else {
            0.0
        },
        assurance_change: governed.mean_assurance - base.mean_assurance,
    };
    Ok(SimulationOutput {
        governed,
        baseline: Some(base),
        delta: Some(delta),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{diurnal_intensity, generate};

    #[test]
    fn small_replay_is_deterministic_and_balanced() {
        let trace = generate(1, 60);
        let policy = PolicyConfig::default();
        let a = simulate(
            &trace,
            &policy,
            &diurnal_intensity(),
            ReviewMode::AutoApprove,
            true,
        )
        .unwrap();
        let b = simulate(
            &trace,
            &policy,
            &diurnal_intensity(),
            ReviewMode::AutoApprove,
            true,
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.governed.executed, 60);
        let first: usize = a.governed.decisions.values().sum();
        assert_eq!(first, 60);
    }

    #[test]
    fn auto_deny_runs_less() {
        let trace = generate(2, 120);
        let policy = PolicyConfig::default();
        let approve = run_governed(
            &trace,
            &policy,
            &diurnal_intensity(),
            ReviewMode::AutoApprove,
        )
        .unwrap();
        let deny =
            run_governed(&trace, &policy, &diurnal_intensity(), ReviewMode::AutoDeny).unwrap();
        assert!(deny.executed <= approve.executed);
        assert_eq!(deny.executed + deny.denied, 120);
    }

    #[test]
    fn downgrade_swaps_only_the_deep_tier() {
        let trace = generate(4, 1);
        let mut entry = trace.entries[0].clone();
        entry.risk = 0.9;
        let plan = plan_for(&entry, &PolicyConfig::default(), 200.0, false).unwrap();
        let phases = executed_phases(&plan, Some("medium"));
        assert_eq!(phases[0].0, "small");
        assert_eq!(phases[1].0, "medium");
    }
}
