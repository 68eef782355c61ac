//! The assembled gate engine: policy, budgets, loops, reviews, intensity and
//! the ledger behind one handle, with optional on-disk persistence.
//!
//! A data directory holds three files:
//!
//! - `ledger.jsonl`: the hash-chained provenance ledger, appended and synced
//!   per record;
//! - `budgets.json`: the budget book (allocations, counters, reservations);
//! - `workflow.json`: regeneration loops, review items and id counters.
//!
//! The JSON snapshots are rewritten atomically after every mutation. On open
//! the ledger is verified and any reservation that the ledger shows as
//! settled but the snapshot still holds live is settled again.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::budget::{
    BudgetBook, BudgetError, BudgetManager, BudgetPeriod, CarbonBudget, ReservationId,
    SettleOutcome,
};
use crate::clock::Clock;
use crate::emission::{estimate_duration, estimate_inference, EmissionBasis};
use crate::intensity::{
    best_window, IntensityError, IntensityFeed, IntensitySeries, TraceFileSource,
};
use crate::ledger::{
    AuditReport, DecisionAction, ExportFormat, GateDecisionRecord, Ledger, LedgerError, Payload,
};
use crate::orchestrator::{LoopRegistry, OrchestratorError, RegenerationLoopState};
use crate::policy::{
    apply_review_outcome, evaluate, review_number, GateContext, GateDecision, GateRequest,
    PolicyConfig, PolicyError, ReviewBook, ReviewItem, ReviewOutcome, ReviewQueue,
    ReviewResolution, ReviewTrigger,
};
use crate::types::{ScopeId, WorkloadEvent, WorkloadKind};

const LEDGER_FILE: &str = "ledger.jsonl";
const BUDGETS_FILE: &str = "budgets.json";
const WORKFLOW_FILE: &str = "workflow.json";

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Budget(#[from] BudgetError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Loop(#[from] OrchestratorError),
    #[error(transparent)]
    Intensity(#[from] IntensityError),
    #[error("invalid workload report: {0}")]
    InvalidReport(String),
    #[error("unknown regeneration loop `{0}`")]
    UnknownLoop(String),
    #[error("state persistence failed: {0}")]
    Persist(String),
}

/// Everything an engine needs besides its storage location.
#[derive(Debug, Clone)]
pub struct EngineSettings {
    pub policy: PolicyConfig,
    /// Re-read on [`Engine::reload_policy`].
    pub policy_path: Option<PathBuf>,
    pub intensity: IntensitySeries,
    /// Re-read on [`Engine::reload_intensity`].
    pub intensity_path: Option<PathBuf>,
    pub clock: Arc<dyn Clock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadItem {
    #[serde(default)]
    pub event_id: Option<String>,
    pub kind: WorkloadKind,
    pub tier: String,
    #[serde(default)]
    pub tokens_in: u64,
    #[serde(default)]
    pub tokens_out: u64,
    /// Seconds; used by duration-based kinds.
    #[serde(default)]
    pub duration: f64,
}

/// Execution report for work admitted by a gate, or explicitly unbudgeted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadReport {
    #[serde(default)]
    pub reservation: Option<ReservationId>,
    #[serde(default)]
    pub scope: Option<ScopeId>,
    #[serde(default)]
    pub unbudgeted: bool,
    pub items: Vec<WorkloadItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedEvents {
    pub seqs: Vec<u64>,
    pub event_ids: Vec<String>,
    /// kWh.
    pub energy: f64,
    /// gCO2e.
    pub carbon: f64,
    pub settle: Option<SettleOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityNow {
    pub at: DateTime<Utc>,
    pub intensity: f64,
    pub series_start: DateTime<Utc>,
    pub series_end: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowAnswer {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    pub mean_intensity: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct WorkflowState {
    loops: BTreeMap<String, RegenerationLoopState>,
    reviews: ReviewBook,
    next_event: u64,
}

pub struct Engine {
    config: RwLock<Arc<PolicyConfig>>,
    policy_path: Option<PathBuf>,
    intensity_path: Option<PathBuf>,
    ledger: Ledger,
    budgets: BudgetManager,
    loops: LoopRegistry,
    reviews: ReviewQueue,
    feed: IntensityFeed,
    clock: Arc<dyn Clock>,
    next_event: AtomicU64,
    data_dir: Option<PathBuf>,
    persist_lock: Mutex<()>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("data_dir", &self.data_dir)
            .field("ledger_len", &self.ledger.len())
            .finish_non_exhaustive()
    }
}

fn read_json<T: for<'de> Deserialize<'de> + Default>(path: &Path) -> Result<T, EngineError> {
    match std::fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map_err(|e| EngineError::Persist(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(T::default()),
        Err(e) => Err(EngineError::Persist(format!("{}: {e}", path.display()))),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    let mut file = std::fs::File::create(&tmp)?;
    file.write_all(bytes)?;
    file.sync_data()?;
    std::fs::rename(&tmp, path)
}

fn trailing_number(id: &str, prefix: &str) -> Option<u64> {
    id.strip_prefix(prefix)?.parse().ok()
}

impl Engine {
    pub fn in_memory(settings: EngineSettings) -> Result<Self, EngineError> {
        Self::assemble(
            settings,
            Ledger::in_memory(),
            BudgetBook::default(),
            WorkflowState::default(),
            None,
        )
    }

    /// Open or create an engine rooted at `dir`.
    pub fn open(dir: impl AsRef<Path>, settings: EngineSettings) -> Result<Self, EngineError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)
            .map_err(|e| EngineError::Persist(format!("{}: {e}", dir.display())))?;
        let ledger = Ledger::open(dir.join(LEDGER_FILE))?;
        let book: BudgetBook = read_json(&dir.join(BUDGETS_FILE))?;
        let workflow: WorkflowState = read_json(&dir.join(WORKFLOW_FILE))?;
        let engine = Self::assemble(settings, ledger, book, workflow, Some(dir.to_path_buf()))?;
        engine.recover()?;
        Ok(engine)
    }

    fn assemble(
        settings: EngineSettings,
        ledger: Ledger,
        book: BudgetBook,
        workflow: WorkflowState,
        data_dir: Option<PathBuf>,
    ) -> Result<Self, EngineError> {
        settings.policy.validate()?;
        let loops = LoopRegistry::from_loops(workflow.loops, settings.policy.regeneration_cap)?;
        Ok(Self {
            config: RwLock::new(Arc::new(settings.policy)),
            policy_path: settings.policy_path,
            intensity_path: settings.intensity_path,
            ledger,
            budgets: BudgetManager::from_book(book, settings.clock.clone()),
            loops,
            reviews: ReviewQueue::from_book(workflow.reviews),
            feed: IntensityFeed::new(settings.intensity),
            clock: settings.clock,
            next_event: AtomicU64::new(workflow.next_event),
            data_dir,
            persist_lock: Mutex::new(()),
        })
    }

    /// Reconcile snapshots with the ledger after an unclean shutdown.
    fn recover(&self) -> Result<(), EngineError> {
        let records = self.ledger.records();
        let mut settled: BTreeMap<ReservationId, f64> = BTreeMap::new();
        let mut overflow_logged = BTreeSet::new();
        let (mut max_res, mut max_rev, mut max_evt) = (0, 0, 0);
        for rec in &records {
            match &rec.payload {
                Payload::Workload(e) => {
                    if let Some(r) = &e.reservation {
                        *settled.entry(r.clone()).or_default() += e.carbon;
                        max_res = max_res.max(trailing_number(&r.0, "res-").unwrap_or(0));
                    }
                    max_evt = max_evt.max(trailing_number(&e.event_id, "evt-").unwrap_or(0));
                }
                Payload::Decision(d) => {
                    if let Some(r) = &d.reservation {
                        max_res = max_res.max(trailing_number(&r.0, "res-").unwrap_or(0));
                        if d.action == DecisionAction::SettleOverflow {
                            overflow_logged.insert(r.clone());
                        }
                    }
                    if let Some(id) = &d.review_id {
                        max_rev = max_rev.max(review_number(id).min(u64::MAX - 1));
                    }
                }
            }
        }
        self.budgets.skip_reservation_ids(max_res);
        self.reviews.skip_ids(max_rev);
        self.next_event.fetch_max(max_evt, Ordering::SeqCst);

        let mut repaired = 0;
        for (id, carbon) in settled {
            if !self.budgets.is_live(&id) {
                continue;
            }
            let scope = self.budgets.reservation_scope(&id)?;
            let outcome = self.budgets.settle(&id, carbon)?;
            if outcome.overflow > 0.0 && !overflow_logged.contains(&id) {
                self.append_overflow(&scope, &id, outcome.overflow)?;
            }
            repaired += 1;
        }
        if repaired > 0 {
            tracing::warn!(repaired, "re-settled reservations found in the ledger");
        }
        self.persist()
    }

    fn persist(&self) -> Result<(), EngineError> {
        let Some(dir) = &self.data_dir else {
            return Ok(());
        };
        let _guard = self.persist_lock.lock().expect("persist lock poisoned");
        let book = serde_json::to_vec_pretty(&self.budgets.book()).expect("budget book serializes");
        let workflow = WorkflowState {
            loops: self.loops.snapshot(),
            reviews: self.reviews.book(),
            next_event: self.next_event.load(Ordering::SeqCst),
        };
        let workflow = serde_json::to_vec_pretty(&workflow).expect("workflow serializes");
        write_atomic(&dir.join(BUDGETS_FILE), &book)
            .and_then(|_| write_atomic(&dir.join(WORKFLOW_FILE), &workflow))
            .map_err(|e| EngineError::Persist(e.to_string()))
    }

    fn ctx<'a>(&'a self, config: &'a PolicyConfig, series: &'a IntensitySeries) -> GateContext<'a> {
        GateContext {
            config,
            budgets: &self.budgets,
            loops: &self.loops,
            reviews: &self.reviews,
            intensity: series,
            ledger: &self.ledger,
            clock: self.clock.as_ref(),
        }
    }

    pub fn config(&self) -> Arc<PolicyConfig> {
        self.config.read().expect("config lock poisoned").clone()
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn budgets(&self) -> &BudgetManager {
        &self.budgets
    }

    pub fn loops(&self) -> &LoopRegistry {
        &self.loops
    }

    pub fn check_gate(&self, request: &GateRequest) -> Result<GateDecision, EngineError> {
        let config = self.config();
        let series = self.feed.current();
        let decision = evaluate(request, &self.ctx(&config, &series), None)?;
        self.persist()?;
        Ok(decision)
    }

    pub fn pending_reviews(&self) -> Vec<ReviewItem> {
        self.reviews.pending()
    }

    pub fn review(&self, review_id: &str) -> Option<ReviewItem> {
        self.reviews.get(review_id)
    }

    pub fn resolve_review(
        &self,
        review_id: &str,
        resolution: &ReviewResolution,
    ) -> Result<GateDecision, EngineError> {
        let config = self.config();
        let series = self.feed.current();
        let result = apply_review_outcome(review_id, resolution, &self.ctx(&config, &series));
        // The claim may have succeeded even if re-evaluation failed.
        self.persist()?;
        Ok(result?)
    }

    pub fn set_budget(
        &self,
        scope: ScopeId,
        allocation: f64,
        soft_threshold: f64,
        period: Option<BudgetPeriod>,
    ) -> Result<CarbonBudget, EngineError> {
        let budget = self
            .budgets
            .set_budget(scope, allocation, soft_threshold, period)?;
        self.persist()?;
        Ok(budget)
    }

    pub fn budget_status(&self, scope: &ScopeId) -> Result<CarbonBudget, EngineError> {
        Ok(self.budgets.status(scope)?)
    }

    pub fn all_budgets(&self) -> Vec<CarbonBudget> {
        self.budgets.all()
    }

    fn append_overflow(
        &self,
        scope: &ScopeId,
        id: &ReservationId,
        overflow: f64,
    ) -> Result<u64, EngineError> {
        let mut rec = GateDecisionRecord::new(
            self.clock.now(),
            scope.clone(),
            DecisionAction::SettleOverflow,
            vec!["budget.settle_overflow".to_string()],
        );
        rec.reservation = Some(id.clone());
        rec.overflow = Some(overflow);
        Ok(self.ledger.append(Payload::Decision(rec))?.seq)
    }

    /// Meter a workload report: estimate each item, settle the reservation
    /// with the total, and append one ledger event per item.
    pub fn record_event(&self, report: &WorkloadReport) -> Result<RecordedEvents, EngineError> {
        if report.items.is_empty() {
            return Err(EngineError::InvalidReport("report has no items".into()));
        }
        let scope = match (&report.reservation, &report.scope, report.unbudgeted) {
            (Some(_), _, true) => {
                return Err(EngineError::InvalidReport(
                    "an unbudgeted report cannot name a reservation".into(),
                ))
            }
            (Some(id), declared, false) => {
                let scope = self.budgets.reservation_scope(id)?;
                if declared.as_ref().is_some_and(|d| d != &scope) {
                    return Err(EngineError::InvalidReport(format!(
                        "reservation {id} belongs to {scope}, not the declared scope"
                    )));
                }
                scope
            }
            (None, Some(scope), true) => scope.clone(),
            _ => {
                return Err(EngineError::InvalidReport(
                    "report needs a reservation or an unbudgeted scope".into(),
                ))
            }
        };

        let config = self.config();
        let now = self.clock.now();
        let intensity = self.feed.current().intensity_at(now)?;
        let mut events = Vec::with_capacity(report.items.len());
        for item in &report.items {
            let tier = config.ladder.get(&item.tier).ok_or_else(|| {
                EngineError::InvalidReport(format!("unknown tier `{}`", item.tier))
            })?;
            let est = match item.kind.basis() {
                EmissionBasis::TokenBased => estimate_inference(
                    item.tokens_in + item.tokens_out,
                    tier,
                    config.pue,
                    intensity,
                ),
                EmissionBasis::DurationBased => {
                    estimate_duration(item.duration, tier, config.pue, intensity)
                }
            }
            .map_err(|e| EngineError::InvalidReport(e.to_string()))?;
            if item.event_id.as_deref().is_some_and(str::is_empty) {
                return Err(EngineError::InvalidReport(
                    "event_id must not be empty".into(),
                ));
            }
            events.push(WorkloadEvent {
                event_id: item.event_id.clone().unwrap_or_default(),
                scope: scope.clone(),
                kind: item.kind,
                tier: tier.name.clone(),
                tokens_in: item.tokens_in,
                tokens_out: item.tokens_out,
                duration: item.duration,
                timestamp: now,
                energy: est.energy,
                carbon: est.carbon,
                intensity_at_time: intensity,
                pue: config.pue,
                reservation: report.reservation.clone(),
            });
        }
        let carbon: f64 = events.iter().map(|e| e.carbon).sum();
        let energy: f64 = events.iter().map(|e| e.energy).sum();

        let settle = match &report.reservation {
            Some(id) => Some(self.budgets.settle(id, carbon)?),
            None => None,
        };
        let mut seqs = Vec::with_capacity(events.len());
        let mut event_ids = Vec::with_capacity(events.len());
        for mut event in events {
            if event.event_id.is_empty() {
                event.event_id =
                    format!("evt-{}", self.next_event.fetch_add(1, Ordering::SeqCst) + 1);
            }
            event_ids.push(event.event_id.clone());
            seqs.push(self.ledger.append(Payload::Workload(event))?.seq);
        }
        if let (Some(id), Some(s)) = (&report.reservation, &settle) {
            if s.overflow > 0.0 {
                self.append_overflow(&scope, id, s.overflow)?;
            }
        }
        self.persist()?;
        Ok(RecordedEvents {
            seqs,
            event_ids,
            energy,
            carbon,
            settle,
        })
    }

    /// Release a gate reservation whose work will not run.
    pub fn cancel_reservation(&self, id: &ReservationId) -> Result<(), EngineError> {
        self.budgets.cancel(id)?;
        self.persist()
    }

    pub fn loop_attempt(
        &self,
        loop_id: &str,
        scope: &ScopeId,
    ) -> Result<RegenerationLoopState, EngineError> {
        let state = self.loops.record_attempt(loop_id, scope)?;
        self.persist()?;
        Ok(state)
    }

    pub fn loop_state(&self, loop_id: &str) -> Result<RegenerationLoopState, EngineError> {
        self.loops
            .get(loop_id)
            .ok_or_else(|| EngineError::UnknownLoop(loop_id.to_string()))
    }

    pub fn all_loops(&self) -> Vec<RegenerationLoopState> {
        self.loops.snapshot().into_values().collect()
    }

    /// Direct justification, outside the review queue. Any pending cap review
    /// for the loop is closed as approved.
    pub fn loop_justify(
        &self,
        loop_id: &str,
        approver: &str,
        text: &str,
        extension: u32,
    ) -> Result<RegenerationLoopState, EngineError> {
        let now = self.clock.now();
        let state = self
            .loops
            .justify(loop_id, approver, text, extension, now)?;
        let review = self.close_cap_review(loop_id, ReviewOutcome::Approve);
        let mut rec = GateDecisionRecord::new(
            now,
            state.scope.clone(),
            DecisionAction::LoopJustification,
            vec!["loop.justified".to_string()],
        );
        rec.loop_id = Some(loop_id.to_string());
        rec.approver = Some(approver.to_string());
        rec.note = Some(text.to_string());
        rec.extension = Some(extension);
        rec.review_id = review;
        self.ledger.append(Payload::Decision(rec))?;
        self.persist()?;
        Ok(state)
    }

    pub fn loop_terminate(
        &self,
        loop_id: &str,
        approver: &str,
        reason: &str,
    ) -> Result<RegenerationLoopState, EngineError> {
        let now = self.clock.now();
        let state = self.loops.terminate(loop_id, approver, reason, now)?;
        let review = self.close_cap_review(loop_id, ReviewOutcome::Deny);
        let mut rec = GateDecisionRecord::new(
            now,
            state.scope.clone(),
            DecisionAction::LoopTermination,
            vec!["loop.terminated".to_string()],
        );
        rec.loop_id = Some(loop_id.to_string());
        rec.approver = Some(approver.to_string());
        rec.note = Some(reason.to_string());
        rec.review_id = review;
        self.ledger.append(Payload::Decision(rec))?;
        self.persist()?;
        Ok(state)
    }

    fn close_cap_review(&self, loop_id: &str, outcome: ReviewOutcome) -> Option<String> {
        let item = self.reviews.pending_cap_review(loop_id)?;
        debug_assert_eq!(item.trigger, ReviewTrigger::RegenerationCap);
        self.reviews
            .claim(&item.review_id, outcome)
            .ok()
            .map(|i| i.review_id)
    }

    pub fn intensity_series(&self) -> Arc<IntensitySeries> {
        self.feed.current()
    }

    pub fn intensity_now(&self) -> Result<IntensityNow, EngineError> {
        let series = self.feed.current();
        let at = self.clock.now();
        Ok(IntensityNow {
            at,
            intensity: series.intensity_at(at)?,
            series_start: series.start(),
            series_end: series.end(),
        })
    }

    /// Lowest-mean step-aligned window of `duration` seconds that ends within
    /// `deadline` seconds from now.
    pub fn intensity_window(
        &self,
        duration: u64,
        deadline: u64,
    ) -> Result<WindowAnswer, EngineError> {
        let series = self.feed.current();
        let (rest, lead) = series.from_step_at(self.clock.now())?;
        let choice = best_window(&rest, duration, lead + deadline)?;
        let start = rest.start() + Duration::seconds(choice.start_offset as i64);
        Ok(WindowAnswer {
            start,
            end: start + Duration::seconds(duration as i64),
            mean_intensity: choice.mean_intensity,
        })
    }

    pub fn audit(&self) -> Result<AuditReport, EngineError> {
        Ok(self.ledger.verify_chain()?)
    }

    pub fn export(&self, format: ExportFormat) -> Result<Vec<u8>, EngineError> {
        Ok(self.ledger.export_audit(format)?)
    }

    /// Swap in a new policy. Loops created afterwards use its cap.
    pub fn set_policy(&self, policy: PolicyConfig) -> Result<(), EngineError> {
        policy.validate()?;
        self.loops.set_default_cap(policy.regeneration_cap)?;
        *self.config.write().expect("config lock poisoned") = Arc::new(policy);
        Ok(())
    }

    /// Re-read the policy file the engine was started with.
    pub fn reload_policy(&self) -> Result<Arc<PolicyConfig>, EngineError> {
        let path = self.policy_path.as_ref().ok_or_else(|| {
            PolicyError::InvalidConfig("engine was started without a policy file".into())
        })?;
        self.set_policy(PolicyConfig::load(path)?)?;
        tracing::info!(path = %path.display(), "policy reloaded");
        Ok(self.config())
    }

    pub fn reload_intensity(&self) -> Result<(), EngineError> {
        let path = self.intensity_path.clone().ok_or_else(|| {
            IntensityError::InvalidSeries("engine was started without a trace file".into())
        })?;
        self.feed.refresh(&TraceFileSource { path })?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::VirtualClock;
    use crate::orchestrator::RiskSignal;
    use crate::policy::{GateKind, Verdict};

    fn t0() -> DateTime<Utc> {
        "2026-03-01T00:00:00Z".parse().unwrap()
    }

    fn settings() -> EngineSettings {
        EngineSettings {
            policy: PolicyConfig::default(),
            policy_path: None,
            intensity: IntensitySeries::new(t0(), 3600, vec![100.0; 48]).unwrap(),
            intensity_path: None,
            clock: Arc::new(VirtualClock::new(t0())),
        }
    }

    fn pr() -> ScopeId {
        "pipeline:ci/pr:1".parse().unwrap()
    }

    fn gate(est: f64) -> GateRequest {
        GateRequest {
            scope: pr(),
            gate_kind: GateKind::PullRequestValidation,
            risk: RiskSignal::manual(0.2).unwrap(),
            est_carbon: est,
            deferrable_by: 0,
            loop_id: None,
        }
    }

    fn tokens(n: u64) -> WorkloadItem {
        WorkloadItem {
            event_id: None,
            kind: WorkloadKind::Inference,
            tier: "small".into(),
            tokens_in: n,
            tokens_out: 0,
            duration: 0.0,
        }
    }

    #[test]
    fn gate_then_settle() {
        let engine = Engine::in_memory(settings()).unwrap();
        engine.set_budget(pr(), 100.0, 0.8, None).unwrap();
        let d = engine.check_gate(&gate(20.0)).unwrap();
        assert_eq!(d.verdict, Verdict::Allow);
        let report = WorkloadReport {
            reservation: d.reservation.clone(),
            scope: None,
            unbudgeted: false,
            items: vec![tokens(1_000_000)],
        };
        let out = engine.record_event(&report).unwrap();
        // 1e6 x 0.3 J / 3.6e6 = 1/12 kWh; x 1.2 x 100 = 10 g
        assert!((out.carbon - 10.0).abs() < 1e-9);
        assert_eq!(out.event_ids, vec!["evt-1"]);
        let b = engine.budget_status(&pr()).unwrap();
        assert!((b.consumed - 10.0).abs() < 1e-9);
        assert_eq!(b.reserved, 0.0);
        assert!(matches!(
            engine.record_event(&report),
            Err(EngineError::Budget(BudgetError::AlreadySettled(_)))
        ));
    }

    #[test]
    fn reports_must_be_anchored() {
        let engine = Engine::in_memory(settings()).unwrap();
        let loose = WorkloadReport {
            reservation: None,
            scope: Some(pr()),
            unbudgeted: false,
            items: vec![tokens(10)],
        };
        assert!(matches!(
            engine.record_event(&loose),
            Err(EngineError::InvalidReport(_))
        ));
        let unbudgeted = WorkloadReport {
            unbudgeted: true,
            ..loose
        };
        let out = engine.record_event(&unbudgeted).unwrap();
        assert_eq!(out.settle, None);
        assert_eq!(engine.ledger().len(), 1);
    }

    #[test]
    fn state_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let reservation = {
            let engine = Engine::open(dir.path(), settings()).unwrap();
            engine.set_budget(pr(), 100.0, 0.8, None).unwrap();
            engine.loop_attempt("l", &pr()).unwrap();
            engine.check_gate(&gate(20.0)).unwrap().reservation.unwrap()
        };
        let engine = Engine::open(dir.path(), settings()).unwrap();
        assert_eq!(engine.budget_status(&pr()).unwrap().reserved, 20.0);
        assert_eq!(engine.loop_state("l").unwrap().attempts, 1);
        assert!(engine.budgets().is_live(&reservation));
        let next = engine.check_gate(&gate(1.0)).unwrap().reservation.unwrap();
        assert_ne!(next, reservation);
    }

    #[test]
    fn recovery_settles_reservations_seen_in_ledger() {
        let dir = tempfile::tempdir().unwrap();
        {
            let engine = Engine::open(dir.path(), settings()).unwrap();
            engine.set_budget(pr(), 100.0, 0.8, None).unwrap();
            engine.check_gate(&gate(20.0)).unwrap();
        }
        // Simulate a crash after the event reached the ledger but before the
        // budget snapshot was rewritten.
        let stale = std::fs::read(dir.path().join(BUDGETS_FILE)).unwrap();
        {
            let engine = Engine::open(dir.path(), settings()).unwrap();
            let report = WorkloadReport {
                reservation: Some(ReservationId("res-000001".into())),
                scope: None,
                unbudgeted: false,
                items: vec![tokens(1_000_000)],
            };
            engine.record_event(&report).unwrap();
        }
        std::fs::write(dir.path().join(BUDGETS_FILE), stale).unwrap();
        let engine = Engine::open(dir.path(), settings()).unwrap();
        let b = engine.budget_status(&pr()).unwrap();
        assert!((b.consumed - 10.0).abs() < 1e-9);
        assert_eq!(b.reserved, 0.0);
        assert!(engine.audit().unwrap().chain_valid);
    }

    #[test]
    fn corrupt_ledger_refuses_to_open() {
        let dir = tempfile::tempdir().unwrap();
        {
            let engine = Engine::open(dir.path(), settings()).unwrap();
            engine.set_budget(pr(), 100.0, 0.8, None).unwrap();
            for _ in 0..3 {
                engine.check_gate(&gate(1.0)).unwrap();
            }
        }
        let path = dir.path().join(LEDGER_FILE);
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replacen("plan.light", "plan.lite", 2)).unwrap();
        match Engine::open(dir.path(), settings()) {
            Err(EngineError::Ledger(LedgerError::Corrupt { first_invalid_seq })) => {
                assert_eq!(first_invalid_seq, 0)
            }
            other => panic!("expected corrupt ledger, got {other:?}"),
        }
    }

    #[test]
    fn direct_justify_closes_cap_review() {
        let engine = Engine::in_memory(settings()).unwrap();
        engine.set_budget(pr(), 100.0, 0.8, None).unwrap();
        for _ in 0..3 {
            engine.loop_attempt("l", &pr()).unwrap();
        }
        let mut req = gate(1.0);
        req.loop_id = Some("l".into());
        assert!(matches!(
            engine.check_gate(&req).unwrap().verdict,
            Verdict::Escalate { .. }
        ));
        assert_eq!(engine.pending_reviews().len(), 1);
        engine.loop_justify("l", "lead", "one more", 1).unwrap();
        assert!(engine.pending_reviews().is_empty());
        assert_eq!(engine.check_gate(&req).unwrap().verdict, Verdict::Allow);
    }

    #[test]
    fn window_query_is_relative_to_now() {
        let mut s = settings();
        s.intensity = IntensitySeries::new(t0(), 3600, vec![300.0, 200.0, 50.0, 400.0]).unwrap();
        let engine = Engine::in_memory(s).unwrap();
        let w = engine.intensity_window(3600, 4 * 3600).unwrap();
        assert_eq!(w.start, t0() + Duration::hours(2));
        assert_eq!(w.mean_intensity, 50.0);
        assert!(engine.intensity_window(3600, 5 * 3600).is_err());
    }
}
