//! Green validation orchestration: two-phase plans, tier escalation and
//! capped regeneration loops.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::emission::{
    combined_assurance, estimate_duration, estimate_inference, EmissionError, EmissionEstimate,
};
use crate::types::{ModelLadder, ModelTier, ScopeId, TypeError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OrchestratorError {
    #[error("tier `{0}` is not in the ladder")]
    TierNotInLadder(String),
    #[error(transparent)]
    Emission(#[from] EmissionError),
    #[error("unknown regeneration loop `{0}`")]
    UnknownLoop(String),
    #[error("regeneration loop `{0}` is terminated")]
    LoopTerminated(String),
    #[error("regeneration loop `{0}` is blocked pending justification")]
    LoopBlocked(String),
    #[error("regeneration loop `{0}` is not blocked")]
    NotBlocked(String),
    #[error("regeneration loop `{0}` is already terminated")]
    AlreadyTerminated(String),
    #[error("justification needs a non-empty approver and text")]
    EmptyJustification,
    #[error("extension must be >= 1")]
    InvalidExtension,
    #[error("regeneration cap must be >= 1")]
    InvalidCap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskSource {
    StaticChecks,
    PriorFailures,
    Manual,
}

/// Caller-supplied risk of failure in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRisk")]
pub struct RiskSignal {
    score: f64,
    source: RiskSource,
}

#[derive(Deserialize)]
struct RawRisk {
    score: f64,
    source: RiskSource,
}

impl TryFrom<RawRisk> for RiskSignal {
    type Error = TypeError;

    fn try_from(raw: RawRisk) -> Result<Self, Self::Error> {
        RiskSignal::new(raw.score, raw.source)
    }
}

impl RiskSignal {
    pub fn new(score: f64, source: RiskSource) -> Result<Self, TypeError> {
        if (0.0..=1.0).contains(&score) {
            Ok(Self { score, source })
        } else {
            Err(TypeError::InvalidRisk(score))
        }
    }

    pub fn manual(score: f64) -> Result<Self, TypeError> {
        Self::new(score, RiskSource::Manual)
    }

    pub fn score(&self) -> f64 {
        self.score
    }

    pub fn source(&self) -> RiskSource {
        self.source
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    Lightweight,
    Deep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkSize {
    Tokens(u64),
    /// Seconds.
    Duration(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedPhase {
    pub kind: PhaseKind,
    pub tier: String,
    pub work: WorkSize,
    pub estimate: EmissionEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationPlan {
    pub phases: Vec<PlannedPhase>,
    /// gCO2e, sum of phase estimates.
    pub est_carbon: f64,
    pub est_assurance: f64,
}

impl ValidationPlan {
    /// Tier of the last (most expensive) phase.
    pub fn top_tier(&self) -> &str {
        &self.phases.last().expect("plans are non-empty").tier
    }

    pub fn is_deep(&self) -> bool {
        self.phases.iter().any(|p| p.kind == PhaseKind::Deep)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanParams {
    /// Deep validation runs only when risk exceeds this.
    pub deep_threshold: f64,
    pub light_work: WorkSize,
    pub deep_work: WorkSize,
    pub pue: f64,
    /// gCO2e/kWh at planning time.
    pub intensity: f64,
}

fn estimate(
    work: WorkSize,
    tier: &ModelTier,
    pue: f64,
    intensity: f64,
) -> Result<EmissionEstimate, EmissionError> {
    match work {
        WorkSize::Tokens(n) => estimate_inference(n, tier, pue, intensity),
        WorkSize::Duration(secs) => estimate_duration(secs, tier, pue, intensity),
    }
}

fn build_plan(
    ladder: &ModelLadder,
    params: &PlanParams,
    deep_tier: Option<&ModelTier>,
) -> Result<ValidationPlan, OrchestratorError> {
    let light = ladder.lowest();
    let mut phases = vec![PlannedPhase {
        kind: PhaseKind::Lightweight,
        tier: light.name.clone(),
        work: params.light_work,
        estimate: estimate(params.light_work, light, params.pue, params.intensity)?,
    }];
    let mut executed = vec![light];
    if let Some(deep) = deep_tier {
        phases.push(PlannedPhase {
            kind: PhaseKind::Deep,
            tier: deep.name.clone(),
            work: params.deep_work,
            estimate: estimate(params.deep_work, deep, params.pue, params.intensity)?,
        });
        executed.push(deep);
    }
    Ok(ValidationPlan {
        est_carbon: phases.iter().map(|p| p.estimate.carbon).sum(),
        est_assurance: combined_assurance(executed)?,
        phases,
    })
}

/// Lowest tier whose escalation threshold exceeds the risk, else the top.
pub fn deep_tier_for<'a>(risk: &RiskSignal, ladder: &'a ModelLadder) -> &'a ModelTier {
    ladder
        .tiers()
        .iter()
        .find(|t| t.escalation_threshold > risk.score())
        .unwrap_or_else(|| ladder.highest())
}

/// Lightweight phase on the cheapest tier, plus a deep phase only when the
/// risk strictly exceeds the deep threshold.
pub fn plan_validation(
    risk: &RiskSignal,
    ladder: &ModelLadder,
    params: &PlanParams,
) -> Result<ValidationPlan, OrchestratorError> {
    let deep = (risk.score() > params.deep_threshold).then(|| deep_tier_for(risk, ladder));
    build_plan(ladder, params, deep)
}

/// Reference plan that always adds the deep phase, tier chosen by risk.
pub fn plan_always_deep(
    risk: &RiskSignal,
    ladder: &ModelLadder,
    params: &PlanParams,
) -> Result<ValidationPlan, OrchestratorError> {
    build_plan(ladder, params, Some(deep_tier_for(risk, ladder)))
}

/// Maximum-depth plan: lightweight plus deep validation on the top tier.
pub fn plan_max_depth(
    ladder: &ModelLadder,
    params: &PlanParams,
) -> Result<ValidationPlan, OrchestratorError> {
    build_plan(ladder, params, Some(ladder.highest()))
}

pub fn escalate_tier<'a>(
    current: &str,
    risk: &RiskSignal,
    ladder: &'a ModelLadder,
) -> Result<&'a ModelTier, OrchestratorError> {
    let tier = ladder
        .get(current)
        .ok_or_else(|| OrchestratorError::TierNotInLadder(current.to_string()))?;
    if risk.score() > tier.escalation_threshold {
        Ok(ladder.above(current).unwrap_or(tier))
    } else {
        Ok(tier)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopState {
    Active,
    Blocked,
    Terminated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Justification {
    pub approver: String,
    pub text: String,
    pub granted_extension: u32,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Termination {
    pub approver: String,
    pub reason: String,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegenerationLoopState {
    pub loop_id: String,
    pub scope: ScopeId,
    pub attempts: u32,
    pub cap: u32,
    pub state: LoopState,
    pub justifications: Vec<Justification>,
    pub termination: Option<Termination>,
}

/// Registry of regeneration loops. Transitions are serialized, so attempts on
/// one loop observe a total order.
#[derive(Debug)]
pub struct LoopRegistry {
    loops: Mutex<BTreeMap<String, RegenerationLoopState>>,
    default_cap: AtomicU32,
}

impl LoopRegistry {
    pub fn new(default_cap: u32) -> Result<Self, OrchestratorError> {
        Self::from_loops(BTreeMap::new(), default_cap)
    }

    pub fn from_loops(
        loops: BTreeMap<String, RegenerationLoopState>,
        default_cap: u32,
    ) -> Result<Self, OrchestratorError> {
        if default_cap == 0 {
            return Err(OrchestratorError::InvalidCap);
        }
        Ok(Self {
            loops: Mutex::new(loops),
            default_cap: AtomicU32::new(default_cap),
        })
    }

    /// Cap given to loops created from now on.
    pub fn set_default_cap(&self, cap: u32) -> Result<(), OrchestratorError> {
        if cap == 0 {
            return Err(OrchestratorError::InvalidCap);
        }
        self.default_cap.store(cap, Ordering::SeqCst);
        Ok(())
    }

    pub fn snapshot(&self) -> BTreeMap<String, RegenerationLoopState> {
        self.loops.lock().expect("loop lock poisoned").clone()
    }

    pub fn get(&self, loop_id: &str) -> Option<RegenerationLoopState> {
        self.loops
            .lock()
            .expect("loop lock poisoned")
            .get(loop_id)
            .cloned()
    }

    /// Count one regeneration attempt. The loop blocks once attempts reach the
    /// cap; the attempt that reaches it still counts.
    pub fn record_attempt(
        &self,
        loop_id: &str,
        scope: &ScopeId,
    ) -> Result<RegenerationLoopState, OrchestratorError> {
        let mut loops = self.loops.lock().expect("loop lock poisoned");
        let entry = loops
            .entry(loop_id.to_string())
            .or_insert_with(|| RegenerationLoopState {
                loop_id: loop_id.to_string(),
                scope: scope.clone(),
                attempts: 0,
                cap: self.default_cap.load(Ordering::SeqCst),
                state: LoopState::Active,
                justifications: Vec::new(),
                termination: None,
            });
        match entry.state {
            LoopState::Terminated => {
                return Err(OrchestratorError::LoopTerminated(loop_id.to_string()))
            }
            LoopState::Blocked => return Err(OrchestratorError::LoopBlocked(loop_id.to_string())),
            LoopState::Active => {}
        }
        entry.attempts += 1;
        if entry.attempts >= entry.cap {
            entry.state = LoopState::Blocked;
        }
        Ok(entry.clone())
    }

    pub fn justify(
        &self,
        loop_id: &str,
        approver: &str,
        text: &str,
        extension: u32,
        now: DateTime<Utc>,
    ) -> Result<RegenerationLoopState, OrchestratorError> {
        if approver.trim().is_empty() || text.trim().is_empty() {
            return Err(OrchestratorError::EmptyJustification);
        }
        if extension == 0 {
            return Err(OrchestratorError::InvalidExtension);
        }
        let mut loops = self.loops.lock().expect("loop lock poisoned");
        let entry = loops
            .get_mut(loop_id)
            .ok_or_else(|| OrchestratorError::UnknownLoop(loop_id.to_string()))?;
        match entry.state {
            LoopState::Blocked => {}
            LoopState::Terminated => {
                return Err(OrchestratorError::LoopTerminated(loop_id.to_string()))
            }
            LoopState::Active => return Err(OrchestratorError::NotBlocked(loop_id.to_string())),
        }
        entry.cap += extension;
        entry.state = LoopState::Active;
        entry.justifications.push(Justification {
            approver: approver.to_string(),
            text: text.to_string(),
            granted_extension: extension,
            timestamp: now,
        });
        Ok(entry.clone())
    }

    pub fn terminate(
        &self,
        loop_id: &str,
        approver: &str,
        reason: &str,
        now: DateTime<Utc>,
    ) -> Result<RegenerationLoopState, OrchestratorError> {
        let mut loops = self.loops.lock().expect("loop lock poisoned");
        let entry = loops
            .get_mut(loop_id)
            .ok_or_else(|| OrchestratorError::UnknownLoop(loop_id.to_string()))?;
        if entry.state == LoopState::Terminated {
            return Err(OrchestratorError::AlreadyTerminated(loop_id.to_string()));
        }
        entry.state = LoopState::Terminated;
        entry.termination = Some(Termination {
            approver: approver.to_string(),
            reason: reason.to_string(),
            timestamp: now,
        });
        Ok(entry.clone())
    }
}
