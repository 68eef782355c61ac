//! The budgeted governance gate: composes loop state, budget state, grid
//! intensity and risk into one verdict per checkpoint.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::budget::{BudgetError, BudgetManager, ConsumeStatus, ReservationId};
use crate::clock::Clock;
use crate::intensity::{best_window, IntensityError, IntensitySeries};
use crate::ledger::{DecisionAction, GateDecisionRecord, Ledger, LedgerError, Payload};
use crate::orchestrator::{
    deep_tier_for, LoopRegistry, LoopState, OrchestratorError, PlanParams, RiskSignal, WorkSize,
};
use crate::types::{ModelLadder, ModelTier, ScopeId};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("no active budget covers scope `{0}`")]
    UnknownScope(ScopeId),
    #[error("no intensity data at {0}")]
    OutOfCoverage(DateTime<Utc>),
    #[error("unknown review `{0}`")]
    UnknownReview(String),
    #[error("review `{0}` is already resolved")]
    AlreadyResolved(String),
    #[error("invalid gate request: {0}")]
    InvalidRequest(String),
    #[error("invalid policy: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Budget(BudgetError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Intensity(IntensityError),
}

impl From<BudgetError> for PolicyError {
    fn from(e: BudgetError) -> Self {
        match e {
            BudgetError::UnknownScope(s) => Self::UnknownScope(s),
            other => Self::Budget(other),
        }
    }
}

impl From<IntensityError> for PolicyError {
    fn from(e: IntensityError) -> Self {
        match e {
            IntensityError::OutOfCoverage(t) => Self::OutOfCoverage(t),
            other => Self::Intensity(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    PullRequestValidation,
    PipelineStage,
    ReleaseReview,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRequest {
    pub scope: ScopeId,
    pub gate_kind: GateKind,
    pub risk: RiskSignal,
    /// gCO2e, pre-flight estimate for the top tier of the plan.
    pub est_carbon: f64,
    /// Seconds the work may be postponed.
    #[serde(default)]
    pub deferrable_by: u64,
    #[serde(default)]
    pub loop_id: Option<String>,
}

impl GateRequest {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.est_carbon.is_finite() && self.est_carbon >= 0.0) {
            return Err(PolicyError::InvalidRequest(format!(
                "est_carbon must be finite and >= 0, got {}",
                self.est_carbon
            )));
        }
        if self.loop_id.as_deref().is_some_and(|l| l.trim().is_empty()) {
            return Err(PolicyError::InvalidRequest(
                "loop_id must not be blank".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Verdict {
    Allow,
    Downgrade { tier: String },
    Defer { until: DateTime<Utc> },
    Escalate { review_id: String },
    Deny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictKind {
    Allow,
    Downgrade,
    Defer,
    Escalate,
    Deny,
}

impl VerdictKind {
    pub const ALL: [VerdictKind; 5] = [
        Self::Allow,
        Self::Downgrade,
        Self::Defer,
        Self::Escalate,
        Self::Deny,
    ];
}

impl Verdict {
    pub fn kind(&self) -> VerdictKind {
        match self {
            Self::Allow => VerdictKind::Allow,
            Self::Downgrade { .. } => VerdictKind::Downgrade,
            Self::Defer { .. } => VerdictKind::Defer,
            Self::Escalate { .. } => VerdictKind::Escalate,
            Self::Deny => VerdictKind::Deny,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub verdict: Verdict,
    /// Identifiers of the rules that fired, in evaluation order.
    pub rationale: Vec<String>,
    pub reservation: Option<ReservationId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum IntensityMode {
    Off,
    /// Defer while current intensity exceeds `max` gCO2e/kWh.
    Threshold {
        max: f64,
    },
    /// Defer whenever a later window has a lower mean.
    BestWindow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftBreachAction {
    Downgrade,
    Escalate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardExceedAction {
    Escalate,
    Deny,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityModes {
    pub pull_request_validation: IntensityMode,
    pub pipeline_stage: IntensityMode,
    pub release_review: IntensityMode,
}

impl IntensityModes {
    pub fn for_gate(&self, kind: GateKind) -> IntensityMode {
        match kind {
            GateKind::PullRequestValidation => self.pull_request_validation,
            GateKind::PipelineStage => self.pipeline_stage,
            GateKind::ReleaseReview => self.release_review,
        }
    }
}

/// Policy document. Serialized as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub schema_version: u32,
    /// Deep validation runs only when risk exceeds this.
    pub deep_threshold: f64,
    pub pue: f64,
    pub regeneration_cap: u32,
    pub light_work_tokens: u64,
    pub deep_work_tokens: u64,
    /// Length of a validation run, used when searching for a low-carbon window.
    pub validation_window_secs: u64,
    pub soft_breach_action: SoftBreachAction,
    pub hard_exceed_action: HardExceedAction,
    /// Highest priority first.
    pub precedence: Vec<VerdictKind>,
    pub intensity: IntensityModes,
    pub ladder: ModelLadder,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            deep_threshold: 0.5,
            pue: 1.2,
            regeneration_cap: 3,
            light_work_tokens: 2_000,
            deep_work_tokens: 20_000,
            validation_window_secs: 3_600,
            soft_breach_action: SoftBreachAction::Downgrade,
            hard_exceed_action: HardExceedAction::Escalate,
            precedence: vec![
                VerdictKind::Deny,
                VerdictKind::Escalate,
                VerdictKind::Defer,
                VerdictKind::Downgrade,
                VerdictKind::Allow,
            ],
            intensity: IntensityModes {
                pull_request_validation: IntensityMode::Threshold { max: 250.0 },
                pipeline_stage: IntensityMode::BestWindow,
                release_review: IntensityMode::Off,
            },
            ladder: ModelLadder::new(vec![
                ModelTier::new("small", 0.3, 150.0, 0.6).with_escalation_threshold(0.4),
                ModelTier::new("medium", 1.0, 400.0, 0.8).with_escalation_threshold(0.75),
                ModelTier::new("large", 3.0, 1000.0, 0.9).with_escalation_threshold(1.0),
            ])
            .expect("default ladder is valid"),
        }
    }
}

impl PolicyConfig {
    pub fn from_toml(text: &str) -> Result<Self, PolicyError> {
        let config: Self =
            toml::from_str(text).map_err(|e| PolicyError::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PolicyError::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("policy serializes")
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: String| Err(PolicyError::InvalidConfig(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "unsupported schema_version {}",
                self.schema_version
            ));
        }
        if !(0.0..=1.0).contains(&self.deep_threshold) {
            return bad(format!(
                "deep_threshold {} outside [0, 1]",
                self.deep_threshold
            ));
        }
        if !(self.pue.is_finite() && self.pue >= 1.0) {
            return bad(format!("pue must be >= 1, got {}", self.pue));
        }
        if self.regeneration_cap == 0 {
            return bad("regeneration_cap must be >= 1".into());
        }
        if self.validation_window_secs == 0 {
            return bad("validation_window_secs must be > 0".into());
        }
        let mut seen = self.precedence.clone();
        seen.sort_by_key(|k| VerdictKind::ALL.iter().position(|a| a == k));
        seen.dedup();
        if self.precedence.len() != VerdictKind::ALL.len() || seen.len() != VerdictKind::ALL.len() {
            return bad("precedence must list each verdict kind exactly once".into());
        }
        for mode in [
            self.intensity.pull_request_validation,
            self.intensity.pipeline_stage,
            self.intensity.release_review,
        ] {
            if let IntensityMode::Threshold { max } = mode {
                if !(max.is_finite() && max > 0.0) {
                    return bad(format!("intensity threshold must be > 0, got {max}"));
                }
            }
        }
        Ok(())
    }

    /// Rank of a verdict kind; higher wins.
    pub fn rank(&self, kind: VerdictKind) -> usize {
        self.precedence.len()
            - self
                .precedence
                .iter()
                .position(|k| *k == kind)
                .expect("validated")
    }

    pub fn plan_params(&self, intensity: f64) -> PlanParams {
        PlanParams {
            deep_threshold: self.deep_threshold,
            light_work: WorkSize::Tokens(self.light_work_tokens),
            deep_work: WorkSize::Tokens(self.deep_work_tokens),
            pue: self.pue,
            intensity,
        }
    }

    /// Tier the plan for this risk tops out at.
    pub fn top_tier(&self, risk: &RiskSignal) -> &ModelTier {
        if risk.score() > self.deep_threshold {
            deep_tier_for(risk, &self.ladder)
        } else {
            self.ladder.lowest()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewTrigger {
    BudgetHardExceeded,
    BudgetSoftBreached,
    RegenerationCap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    Pending,
    Approved,
    Denied,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewOutcome {
    Approve,
    Deny,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub review_id: String,
    pub created: DateTime<Utc>,
    pub scope: ScopeId,
    pub trigger: ReviewTrigger,
    pub context: GateRequest,
    pub status: ReviewStatus,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReviewBook {
    items: BTreeMap<String, ReviewItem>,
    next: u64,
}

/// Human review items. Resolution is claimed atomically, so an item is
/// resolved at most once.
#[derive(Debug, Default)]
pub struct ReviewQueue {
    book: Mutex<ReviewBook>,
}

impl ReviewQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_book(book: ReviewBook) -> Self {
        Self {
            book: Mutex::new(book),
        }
    }

    pub fn book(&self) -> ReviewBook {
        self.book.lock().expect("review lock poisoned").clone()
    }

    pub fn open(
        &self,
        trigger: ReviewTrigger,
        context: &GateRequest,
        now: DateTime<Utc>,
    ) -> ReviewItem {
        let mut book = self.book.lock().expect("review lock poisoned");
        book.next += 1;
        let item = ReviewItem {
            review_id: format!("rev-{}", book.next),
            created: now,
            scope: context.scope.clone(),
            trigger,
            context: context.clone(),
            status: ReviewStatus::Pending,
        };
        book.items.insert(item.review_id.clone(), item.clone());
        item
    }

    /// Make sure review ids issued from now on are numbered above `seen`.
    pub fn skip_ids(&self, seen: u64) {
        let mut book = self.book.lock().expect("review lock poisoned");
        book.next = book.next.max(seen);
    }

    pub fn get(&self, review_id: &str) -> Option<ReviewItem> {
        self.book
            .lock()
            .expect("review lock poisoned")
            .items
            .get(review_id)
            .cloned()
    }

    /// Pending items, oldest first.
    pub fn pending(&self) -> Vec<ReviewItem> {
        let book = self.book.lock().expect("review lock poisoned");
        let mut items: Vec<_> = book
            .items
            .values()
            .filter(|i| i.status == ReviewStatus::Pending)
            .cloned()
            .collect();
        items.sort_by_key(|i| (i.created, review_number(&i.review_id)));
        items
    }

    /// The pending regeneration-cap review for a loop, if one is open.
    pub fn pending_cap_review(&self, loop_id: &str) -> Option<ReviewItem> {
        self.pending().into_iter().find(|i| {
            i.trigger == ReviewTrigger::RegenerationCap
                && i.context.loop_id.as_deref() == Some(loop_id)
        })
    }

    pub fn claim(
        &self,
        review_id: &str,
        outcome: ReviewOutcome,
    ) -> Result<ReviewItem, PolicyError> {
        let mut book = self.book.lock().expect("review lock poisoned");
        let item = book
            .items
            .get_mut(review_id)
            .ok_or_else(|| PolicyError::UnknownReview(review_id.to_string()))?;
        if item.status != ReviewStatus::Pending {
            return Err(PolicyError::AlreadyResolved(review_id.to_string()));
        }
        item.status = match outcome {
            ReviewOutcome::Approve => ReviewStatus::Approved,
            ReviewOutcome::Deny => ReviewStatus::Denied,
        };
        Ok(item.clone())
    }
}

pub(crate) fn review_number(id: &str) -> u64 {
    id.trim_start_matches("rev-").parse().unwrap_or(u64::MAX)
}

/// Shared state a gate evaluation reads and updates.
pub struct GateContext<'a> {
    pub config: &'a PolicyConfig,
    pub budgets: &'a BudgetManager,
    pub loops: &'a LoopRegistry,
    pub reviews: &'a ReviewQueue,
    pub intensity: &'a IntensitySeries,
    pub ledger: &'a Ledger,
    pub clock: &'a dyn Clock,
}

/// Verdict proposed by one rule, with the review trigger it would open.
struct Proposal {
    verdict: Verdict,
    trigger: Option<ReviewTrigger>,
}

impl Proposal {
    fn plain(verdict: Verdict) -> Self {
        Self {
            verdict,
            trigger: None,
        }
    }

    fn escalate(trigger: ReviewTrigger) -> Self {
        Self {
            verdict: Verdict::Escalate {
                review_id: String::new(),
            },
            trigger: Some(trigger),
        }
    }
}

/// Earliest lower-carbon start within `deferrable_by`, if deferring helps.
fn deferred_start(
    series: &IntensitySeries,
    now: DateTime<Utc>,
    deferrable_by: u64,
    duration: u64,
) -> Result<Option<DateTime<Utc>>, PolicyError> {
    if deferrable_by == 0 {
        return Ok(None);
    }
    let (rest, lead) = series.from_step_at(now)?;
    let deadline = (lead + deferrable_by + duration).min(rest.coverage());
    match best_window(&rest, duration, deadline) {
        Ok(w) if w.start_offset > lead => Ok(Some(
            rest.start() + Duration::seconds(w.start_offset as i64),
        )),
        Ok(_) | Err(IntensityError::InfeasibleWindow(_)) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Run the gate rules in order: regeneration cap, budget, intensity, plan.
///
/// `override_trigger` is set when a human approved an escalation; the rule it
/// names yields Allow instead of its usual verdict.
pub fn evaluate(
    request: &GateRequest,
    ctx: &GateContext<'_>,
    override_trigger: Option<ReviewTrigger>,
) -> Result<GateDecision, PolicyError> {
    request.validate()?;
    let config = ctx.config;
    let now = ctx.clock.now();
    if !ctx.budgets.covers(&request.scope) {
        return Err(PolicyError::UnknownScope(request.scope.clone()));
    }
    let mode = config.intensity.for_gate(request.gate_kind);
    let current = match mode {
        IntensityMode::Off => None,
        _ => Some(ctx.intensity.intensity_at(now)?),
    };

    let mut rationale = Vec::new();
    let mut proposals = Vec::new();

    // Regeneration cap.
    if let Some(loop_id) = &request.loop_id {
        match ctx.loops.get(loop_id).map(|l| l.state) {
            Some(LoopState::Blocked) => {
                rationale.push("regen.blocked".to_string());
                proposals.push(Proposal::escalate(ReviewTrigger::RegenerationCap));
            }
            Some(LoopState::Terminated) => {
                rationale.push("regen.terminated".to_string());
                proposals.push(Proposal::plain(Verdict::Deny));
            }
            _ => rationale.push("regen.ok".to_string()),
        }
    }

    // Budget.
    let top = config.top_tier(&request.risk);
    let mut est_carbon = request.est_carbon;
    let mut reservation: Option<ReservationId>;
    let mut override_marker = false;
    let budget_override = matches!(
        override_trigger,
        Some(ReviewTrigger::BudgetHardExceeded | ReviewTrigger::BudgetSoftBreached)
    );
    if budget_override {
        let res = ctx.budgets.reserve_override(&request.scope, est_carbon)?;
        reservation = res.reservation;
        override_marker = true;
        rationale.push("budget.override".to_string());
    } else {
        let res = ctx.budgets.reserve(&request.scope, est_carbon)?;
        reservation = res.reservation;
        match res.outcome.status {
            ConsumeStatus::Ok => rationale.push("budget.ok".to_string()),
            ConsumeStatus::HardExceeded => match config.hard_exceed_action {
                HardExceedAction::Escalate => {
                    rationale.push("budget.hard.escalate".to_string());
                    proposals.push(Proposal::escalate(ReviewTrigger::BudgetHardExceeded));
                }
                HardExceedAction::Deny => {
                    rationale.push("budget.hard.deny".to_string());
                    proposals.push(Proposal::plain(Verdict::Deny));
                }
            },
            ConsumeStatus::SoftBreached => {
                match (config.soft_breach_action, config.ladder.below(&top.name)) {
                    (SoftBreachAction::Escalate, _) => {
                        rationale.push("budget.soft.escalate".to_string());
                        proposals.push(Proposal::escalate(ReviewTrigger::BudgetSoftBreached));
                    }
                    (SoftBreachAction::Downgrade, Some(lower)) => {
                        if let Some(id) = reservation.take() {
                            ctx.budgets.cancel(&id)?;
                        }
                        est_carbon *= lower.energy_per_token / top.energy_per_token;
                        let res = ctx.budgets.reserve(&request.scope, est_carbon)?;
                        reservation = res.reservation;
                        rationale.push(format!("budget.soft.downgrade:{}", lower.name));
                        proposals.push(Proposal::plain(Verdict::Downgrade {
                            tier: lower.name.clone(),
                        }));
                    }
                    (SoftBreachAction::Downgrade, None) => {
                        let until = deferred_start(
                            ctx.intensity,
                            now,
                            request.deferrable_by,
                            config.validation_window_secs,
                        )
                        .unwrap_or(None);
                        match until {
                            Some(until) => {
                                rationale.push("budget.soft.defer".to_string());
                                proposals.push(Proposal::plain(Verdict::Defer { until }));
                            }
                            None => {
                                rationale.push("budget.soft.escalate".to_string());
                                proposals
                                    .push(Proposal::escalate(ReviewTrigger::BudgetSoftBreached));
                            }
                        }
                    }
                }
            }
        }
    }

    // Carbon-intensity scheduling.
    match (mode, current) {
        (IntensityMode::Threshold { max }, Some(now_intensity)) if now_intensity > max => {
            match deferred_start(
                ctx.intensity,
                now,
                request.deferrable_by,
                config.validation_window_secs,
            )? {
                Some(until) => {
                    rationale.push("intensity.defer".to_string());
                    proposals.push(Proposal::plain(Verdict::Defer { until }));
                }
                None => rationale.push("intensity.high_no_window".to_string()),
            }
        }
        (IntensityMode::BestWindow, Some(_)) => {
            match deferred_start(
                ctx.intensity,
                now,
                request.deferrable_by,
                config.validation_window_secs,
            )? {
                Some(until) => {
                    rationale.push("intensity.defer".to_string());
                    proposals.push(Proposal::plain(Verdict::Defer { until }));
                }
                None => rationale.push("intensity.ok".to_string()),
            }
        }
        (IntensityMode::Off, _) => rationale.push("intensity.unchecked".to_string()),
        _ => rationale.push("intensity.ok".to_string()),
    }

    // Model escalation.
    if request.risk.score() > config.deep_threshold {
        rationale.push(format!("plan.deep:{}", top.name));
    } else {
        rationale.push("plan.light".to_string());
    }

    let winner = proposals
        .into_iter()
        .max_by_key(|p| config.rank(p.verdict.kind()))
        .unwrap_or_else(|| Proposal::plain(Verdict::Allow));
    let verdict = match (winner.verdict, winner.trigger) {
        (Verdict::Escalate { .. }, Some(trigger)) => {
            let existing = match (trigger, &request.loop_id) {
                (ReviewTrigger::RegenerationCap, Some(l)) => ctx.reviews.pending_cap_review(l),
                _ => None,
            };
            let item = existing.unwrap_or_else(|| ctx.reviews.open(trigger, request, now));
            Verdict::Escalate {
                review_id: item.review_id,
            }
        }
        (v, _) => v,
    };
    if !matches!(verdict, Verdict::Allow | Verdict::Downgrade { .. }) {
        if let Some(id) = reservation.take() {
            ctx.budgets.cancel(&id)?;
        }
    }

    let mut record = GateDecisionRecord::new(
        now,
        request.scope.clone(),
        DecisionAction::GateEvaluation,
        rationale.clone(),
    );
    record.verdict = Some(verdict.clone());
    record.gate_kind = Some(request.gate_kind);
    record.risk = Some(request.risk.score());
    record.est_carbon = Some(est_carbon);
    record.reservation = reservation.clone();
    record.loop_id = request.loop_id.clone();
    record.override_marker = override_marker;
    if let Verdict::Escalate { review_id } = &verdict {
        record.review_id = Some(review_id.clone());
    }
    if let Err(e) = ctx.ledger.append(Payload::Decision(record)) {
        if let Some(id) = &reservation {
            let _ = ctx.budgets.cancel(id);
        }
        return Err(e.into());
    }

    tracing::debug!(scope = %request.scope, verdict = ?verdict.kind(), "gate evaluated");
    Ok(GateDecision {
        verdict,
        rationale,
        reservation,
    })
}

/// Human resolution of a review item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewResolution {
    pub outcome: ReviewOutcome,
    pub approver: String,
    #[serde(default)]
    pub note: String,
    /// Extra attempts granted when approving a regeneration-cap review.
    #[serde(default)]
    pub extension: Option<u32>,
}

/// Resolve a pending review. Approval re-runs the gate with the triggering
/// rule overridden; denial yields Deny and, for a regeneration cap, ends the
/// loop.
pub fn apply_review_outcome(
    review_id: &str,
    resolution: &ReviewResolution,
    ctx: &GateContext<'_>,
) -> Result<GateDecision, PolicyError> {
    let item = ctx
        .reviews
        .get(review_id)
        .ok_or_else(|| PolicyError::UnknownReview(review_id.to_string()))?;
    if item.status != ReviewStatus::Pending {
        return Err(PolicyError::AlreadyResolved(review_id.to_string()));
    }
    if resolution.approver.trim().is_empty() {
        return Err(OrchestratorError::EmptyJustification.into());
    }
    let cap_review = item.trigger == ReviewTrigger::RegenerationCap;
    let extension = resolution.extension.unwrap_or(1);
    if cap_review && resolution.outcome == ReviewOutcome::Approve {
        if resolution.note.trim().is_empty() {
            return Err(OrchestratorError::EmptyJustification.into());
        }
        if extension == 0 {
            return Err(OrchestratorError::InvalidExtension.into());
        }
    }
    let item = ctx.reviews.claim(review_id, resolution.outcome)?;
    let now = ctx.clock.now();
    let loop_id = item.context.loop_id.clone();

    let mut rationale = vec![match resolution.outcome {
        ReviewOutcome::Approve => "review.approved".to_string(),
        ReviewOutcome::Deny => "review.denied".to_string(),
    }];
    if cap_review {
        if let Some(l) = &loop_id {
            let changed = match resolution.outcome {
                ReviewOutcome::Approve => ctx
                    .loops
                    .justify(l, &resolution.approver, &resolution.note, extension, now)
                    .map(|_| "loop.justified"),
                ReviewOutcome::Deny => {
                    let reason = if resolution.note.trim().is_empty() {
                        "review denied"
                    } else {
                        resolution.note.as_str()
                    };
                    ctx.loops
                        .terminate(l, &resolution.approver, reason, now)
                        .map(|_| "loop.terminated")
                }
            };
            match changed {
                Ok(tag) => rationale.push(tag.to_string()),
                Err(
                    OrchestratorError::NotBlocked(_)
                    | OrchestratorError::AlreadyTerminated(_)
                    | OrchestratorError::LoopTerminated(_),
                ) => {}
                Err(e) => return Err(e.into()),
            }
        }
    }

    let mut record = GateDecisionRecord::new(
        now,
        item.scope.clone(),
        DecisionAction::ReviewOutcome,
        rationale,
    );
    record.review_id = Some(item.review_id.clone());
    record.gate_kind = Some(item.context.gate_kind);
    record.loop_id = loop_id;
    record.approver = Some(resolution.approver.clone());
    record.note = Some(resolution.note.clone());
    if cap_review && resolution.outcome == ReviewOutcome::Approve {
        record.extension = Some(extension);
    }
    if resolution.outcome == ReviewOutcome::Deny {
        record.verdict = Some(Verdict::Deny);
    }
    ctx.ledger.append(Payload::Decision(record))?;

    match resolution.outcome {
        ReviewOutcome::Deny => Ok(GateDecision {
            verdict: Verdict::Deny,
            rationale: vec!["review.denied".to_string()],
            reservation: None,
        }),
        ReviewOutcome::Approve => evaluate(&item.context, ctx, Some(item.trigger)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::VirtualClock;
    use std::sync::Arc;

    fn t0() -> DateTime<Utc> {
        "2026-03-01T00:00:00Z".parse().unwrap()
    }

    struct Fixture {
        config: PolicyConfig,
        budgets: BudgetManager,
        loops: LoopRegistry,
        reviews: ReviewQueue,
        series: IntensitySeries,
        ledger: Ledger,
        clock: Arc<VirtualClock>,
    }

    impl Fixture {
        fn new(values: Vec<f64>) -> Self {
            let clock = Arc::new(VirtualClock::new(t0()));
            let config = PolicyConfig::default();
            Self {
                budgets: BudgetManager::new(clock.clone()),
                loops: LoopRegistry::new(config.regeneration_cap).unwrap(),
                reviews: ReviewQueue::new(),
                series: IntensitySeries::new(t0(), 3600, values).unwrap(),
                ledger: Ledger::in_memory(),
                clock,
                config,
            }
        }

        fn ctx(&self) -> GateContext<'_> {
            GateContext {
                config: &self.config,
                budgets: &self.budgets,
                loops: &self.loops,
                reviews: &self.reviews,
                intensity: &self.series,
                ledger: &self.ledger,
                clock: self.clock.as_ref(),
            }
        }
    }

    fn pr() -> ScopeId {
        "pipeline:ci/pr:7".parse().unwrap()
    }

    fn request(risk: f64, est: f64) -> GateRequest {
        GateRequest {
            scope: pr(),
            gate_kind: GateKind::PullRequestValidation,
            risk: RiskSignal::manual(risk).unwrap(),
            est_carbon: est,
            deferrable_by: 0,
            loop_id: None,
        }
    }

    #[test]
    fn all_clear_allows_with_reservation() {
        let f = Fixture::new(vec![100.0; 24]);
        f.budgets.set_budget(pr(), 100.0, 0.8, None).unwrap();
        let d = evaluate(&request(0.2, 10.0), &f.ctx(), None).unwrap();
        assert_eq!(d.verdict, Verdict::Allow);
        assert_eq!(d.rationale, vec!["budget.ok", "intensity.ok", "plan.light"]);
        let id = d.reservation.unwrap();
        assert!(f.budgets.is_live(&id));
        assert_eq!(f.budgets.status(&pr()).unwrap().reserved, 10.0);
        assert_eq!(f.ledger.len(), 1);
    }

    #[test]
    fn hard_exceeded_escalates_without_holding_budget() {
        let f = Fixture::new(vec![100.0; 24]);
        f.budgets.set_budget(pr(), 5.0, 0.8, None).unwrap();
        let d = evaluate(&request(0.2, 10.0), &f.ctx(), None).unwrap();
        let Verdict::Escalate { review_id } = &d.verdict else {
            panic!("expected escalate, got {:?}", d.verdict)
        };
        assert_eq!(d.reservation, None);
        assert_eq!(f.budgets.status(&pr()).unwrap().reserved, 0.0);
        let item = f.reviews.get(review_id).unwrap();
        assert_eq!(item.trigger, ReviewTrigger::BudgetHardExceeded);
        assert!(d.rationale.contains(&"budget.hard.escalate".to_string()));
    }

    #[test]
    fn hard_exceeded_can_deny() {
        let mut f = Fixture::new(vec![100.0; 24]);
        f.config.hard_exceed_action = HardExceedAction::Deny;
        f.budgets.set_budget(pr(), 5.0, 0.8, None).unwrap();
        let d = evaluate(&request(0.2, 10.0), &f.ctx(), None).unwrap();
        assert_eq!((d.verdict, d.reservation), (Verdict::Deny, None));
        assert!(f.reviews.pending().is_empty());
    }

    #[test]
    fn high_intensity_defers_to_best_window() {
        let mut f = Fixture::new(vec![500.0, 400.0, 100.0, 120.0, 480.0]);
        f.config.intensity.pull_request_validation = IntensityMode::Threshold { max: 150.0 };
        f.budgets.set_budget(pr(), 100.0, 0.8, None).unwrap();
        let mut req = request(0.2, 10.0);
        req.deferrable_by = 5 * 3600;
        let d = evaluate(&req, &f.ctx(), None).unwrap();
        assert_eq!(
            d.verdict,
            Verdict::Defer {
                until: t0() + Duration::hours(2)
            }
        );
        assert_eq!(d.reservation, None);
        assert_eq!(f.budgets.status(&pr()).unwrap().reserved, 0.0);
        assert!(d.rationale.contains(&"intensity.defer".to_string()));
    }

    #[test]
    fn high_intensity_without_slack_proceeds() {
        let mut f = Fixture::new(vec![500.0, 400.0, 100.0]);
        f.config.intensity.pull_request_validation = IntensityMode::Threshold { max: 150.0 };
        f.budgets.set_budget(pr(), 100.0, 0.8, None).unwrap();
        let d = evaluate(&request(0.2, 10.0), &f.ctx(), None).unwrap();
        assert_eq!(d.verdict, Verdict::Allow);
        assert!(d
            .rationale
            .contains(&"intensity.high_no_window".to_string()));
    }

    #[test]
    fn soft_breach_downgrades_and_rereserves() {
        let f = Fixture::new(vec![100.0; 24]);
        f.budgets.set_budget(pr(), 100.0, 0.5, None).unwrap();
        // risk 0.6 plans deep on medium; 60 g crosses the 50 g soft line.
        let d = evaluate(&request(0.6, 60.0), &f.ctx(), None).unwrap();
        assert_eq!(
            d.verdict,
            Verdict::Downgrade {
                tier: "small".into()
            }
        );
        // 60 x 0.3 / 1.0
        let reserved = f.budgets.status(&pr()).unwrap().reserved;
        assert!((reserved - 18.0).abs() < 1e-9);
        assert!(f.budgets.is_live(&d.reservation.unwrap()));
    }

    #[test]
    fn soft_breach_at_lowest_tier_escalates_or_defers() {
        let f = Fixture::new(vec![100.0; 24]);
        f.budgets.set_budget(pr(), 100.0, 0.5, None).unwrap();
        let d = evaluate(&request(0.2, 60.0), &f.ctx(), None).unwrap();
        assert!(matches!(d.verdict, Verdict::Escalate { .. }));

        let f = Fixture::new(vec![300.0, 50.0, 300.0]);
        f.budgets.set_budget(pr(), 100.0, 0.5, None).unwrap();
        let mut req = request(0.2, 60.0);
        req.deferrable_by = 7200;
        let d = evaluate(&req, &f.ctx(), None).unwrap();
        assert_eq!(
            d.verdict,
            Verdict::Defer {
                until: t0() + Duration::hours(1)
            }
        );
    }

    #[test]
    fn unknown_scope_and_coverage_errors() {
        let f = Fixture::new(vec![100.0; 2]);
        assert!(matches!(
            evaluate(&request(0.2, 1.0), &f.ctx(), None),
            Err(PolicyError::UnknownScope(_))
        ));
        f.budgets.set_budget(pr(), 100.0, 0.8, None).unwrap();
        f.clock.advance(Duration::hours(5));
        assert!(matches!(
            evaluate(&request(0.2, 1.0), &f.ctx(), None),
            Err(PolicyError::OutOfCoverage(_))
        ));
        assert!(f.ledger.is_empty());
    }

    #[test]
    fn approving_budget_escalation_overrides_with_marker() {
        let f = Fixture::new(vec![100.0; 24]);
        f.budgets.set_budget(pr(), 5.0, 0.8, None).unwrap();
        let d = evaluate(&request(0.2, 10.0), &f.ctx(), None).unwrap();
        let Verdict::Escalate { review_id } = d.verdict else {
            panic!()
        };
        let approve = ReviewResolution {
            outcome: ReviewOutcome::Approve,
            approver: "lead".into(),
            note: "release blocker".into(),
            extension: None,
        };
        let after = apply_review_outcome(&review_id, &approve, &f.ctx()).unwrap();
        assert_eq!(after.verdict, Verdict::Allow);
        assert!(after.rationale.contains(&"budget.override".to_string()));
        let last = f.ledger.records().pop().unwrap();
        let Payload::Decision(rec) = last.payload else {
            panic!()
        };
        assert!(rec.override_marker);
        assert!(matches!(
            apply_review_outcome(&review_id, &approve, &f.ctx()),
            Err(PolicyError::AlreadyResolved(_))
        ));
        assert!(matches!(
            apply_review_outcome("rev-99", &approve, &f.ctx()),
            Err(PolicyError::UnknownReview(_))
        ));
    }

    #[test]
    fn denying_review_denies_without_reservation() {
        let f = Fixture::new(vec![100.0; 24]);
        f.budgets.set_budget(pr(), 5.0, 0.8, None).unwrap();
        let d = evaluate(&request(0.2, 10.0), &f.ctx(), None).unwrap();
        let Verdict::Escalate { review_id } = d.verdict else {
            panic!()
        };
        let deny = ReviewResolution {
            outcome: ReviewOutcome::Deny,
            approver: "lead".into(),
            note: String::new(),
            extension: None,
        };
        let after = apply_review_outcome(&review_id, &deny, &f.ctx()).unwrap();
        assert_eq!((after.verdict, after.reservation), (Verdict::Deny, None));
        assert_eq!(f.budgets.live_reservations(), vec![]);
    }

    #[test]
    fn blocked_loop_escalates_and_approval_extends_cap() {
        let f = Fixture::new(vec![100.0; 24]);
        f.budgets.set_budget(pr(), 100.0, 0.8, None).unwrap();
        for _ in 0..3 {
            f.loops.record_attempt("pr7#a", &pr()).unwrap();
        }
        let mut req = request(0.2, 1.0);
        req.loop_id = Some("pr7#a".into());
        let d = evaluate(&req, &f.ctx(), None).unwrap();
        let Verdict::Escalate { review_id } = d.verdict else {
            panic!()
        };
        assert_eq!(d.rationale[0], "regen.blocked");
        // A second check reuses the open review.
        let again = evaluate(&req, &f.ctx(), None).unwrap();
        assert_eq!(
            again.verdict,
            Verdict::Escalate {
                review_id: review_id.clone()
            }
        );

        let approve = ReviewResolution {
            outcome: ReviewOutcome::Approve,
            approver: "lead".into(),
            note: "flaky fixture".into(),
            extension: Some(2),
        };
        let after = apply_review_outcome(&review_id, &approve, &f.ctx()).unwrap();
        assert_eq!(after.verdict, Verdict::Allow);
        assert_eq!(f.loops.get("pr7#a").unwrap().cap, 5);
    }

    #[test]
    fn terminated_loop_denies() {
        let f = Fixture::new(vec![100.0; 24]);
        f.budgets.set_budget(pr(), 100.0, 0.8, None).unwrap();
        f.loops.record_attempt("l", &pr()).unwrap();
        f.loops.terminate("l", "lead", "stop", t0()).unwrap();
        let mut req = request(0.2, 1.0);
        req.loop_id = Some("l".into());
        let d = evaluate(&req, &f.ctx(), None).unwrap();
        assert_eq!((d.verdict, d.reservation), (Verdict::Deny, None));
    }

    #[test]
    fn precedence_is_configurable() {
        let mut f = Fixture::new(vec![500.0, 100.0, 100.0]);
        f.config.intensity.pull_request_validation = IntensityMode::Threshold { max: 150.0 };
        f.config.precedence = vec![
            VerdictKind::Deny,
            VerdictKind::Defer,
            VerdictKind::Escalate,
            VerdictKind::Downgrade,
            VerdictKind::Allow,
        ];
        f.budgets.set_budget(pr(), 5.0, 0.8, None).unwrap();
        let mut req = request(0.2, 10.0);
        req.deferrable_by = 7200;
        let d = evaluate(&req, &f.ctx(), None).unwrap();
        assert!(matches!(d.verdict, Verdict::Defer { .. }));
        assert!(f.reviews.pending().is_empty());
    }

    #[test]
    fn config_round_trips_and_validates() {
        let config = PolicyConfig::default();
        let text = config.to_toml();
        assert_eq!(PolicyConfig::from_toml(&text).unwrap(), config);
        assert!(text.contains("schema_version = 1"));

        let dup = text.replace("\"allow\"", "\"deny\"");
        assert!(PolicyConfig::from_toml(&dup).is_err());
        let future = text.replace("schema_version = 1", "schema_version = 2");
        assert!(PolicyConfig::from_toml(&future).is_err());
    }

    #[test]
    fn verdict_wire_format() {
        let v = Verdict::Downgrade {
            tier: "small".into(),
        };
        assert_eq!(
            serde_json::to_string(&v).unwrap(),
            r#"{"kind":"downgrade","tier":"small"}"#
        );
        assert_eq!(
            serde_json::to_string(&Verdict::Allow).unwrap(),
            r#"{"kind":"allow"}"#
        );
    }
}
