//! Hierarchical carbon budgets with soft and hard thresholds.
//!
//! A scope's budget is an envelope over its descendants: charging a pull
//! request also charges its pipeline and release whenever those carry budgets.
//! Every mutating operation checks and updates the whole chain under a single
//! lock, so it either applies at every budgeted level or at none.
//!
//! Soft thresholds compare the committed amount (`consumed + reserved`)
//! against `soft_threshold x allocation`; the hard limit is the allocation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::{Arc, Mutex, MutexGuard};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::types::ScopeId;
use crate::CARBON_EPSILON_G;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BudgetError {
    #[error("invalid allocation: {0}")]
    InvalidAllocation(String),
    #[error("amount must be finite and >= 0, got {0}")]
    InvalidAmount(f64),
    #[error("no active budget covers scope {0}")]
    UnknownScope(ScopeId),
    #[error("unknown reservation {0}")]
    UnknownReservation(ReservationId),
    #[error("reservation {0} was already settled or cancelled")]
    AlreadySettled(ReservationId),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReservationId(pub String);

impl fmt::Display for ReservationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetPeriod {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarbonBudget {
    pub scope: ScopeId,
    /// gCO2e.
    pub allocation: f64,
    pub consumed: f64,
    pub reserved: f64,
    pub soft_threshold: f64,
    pub period: Option<BudgetPeriod>,
}

impl CarbonBudget {
    pub fn headroom(&self) -> f64 {
        self.allocation - self.consumed - self.reserved
    }

    fn is_active(&self, now: DateTime<Utc>) -> bool {
        self.period.is_none_or(|p| p.start <= now && now < p.end)
    }

    fn over_soft(&self) -> bool {
        self.consumed + self.reserved > self.soft_threshold * self.allocation + CARBON_EPSILON_G
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsumeStatus {
    Ok,
    SoftBreached,
    HardExceeded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsumeOutcome {
    pub status: ConsumeStatus,
    /// Smallest headroom over the budgeted chain after the operation, or the
    /// violating level's headroom on `HardExceeded`.
    pub remaining: f64,
    pub breached_scope: Option<ScopeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReserveOutcome {
    pub outcome: ConsumeOutcome,
    /// Present unless the reservation was refused.
    pub reservation: Option<ReservationId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettleOutcome {
    pub outcome: ConsumeOutcome,
    /// Grams actually added to `consumed`.
    pub charged: f64,
    /// Grams of `actual` that could not be charged without breaking the
    /// allocation.
    pub overflow: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Reservation {
    scope: ScopeId,
    amount: f64,
    levels: Vec<ScopeId>,
    overridden: bool,
}

/// Serializable state of the budget book, used for persistence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BudgetBook {
    budgets: BTreeMap<ScopeId, CarbonBudget>,
    reservations: BTreeMap<ReservationId, Reservation>,
    closed: BTreeSet<ReservationId>,
    next_reservation: u64,
}

impl BudgetBook {
    /// Budgeted levels covering `scope` at `now`, root first.
    fn active_levels(&self, scope: &ScopeId, now: DateTime<Utc>) -> Vec<ScopeId> {
        let mut levels: Vec<ScopeId> = scope
            .chain()
            .filter(|s| self.budgets.get(*s).is_some_and(|b| b.is_active(now)))
            .cloned()
            .collect();
        levels.reverse();
        levels
    }

    fn first_hard_violation(&self, levels: &[ScopeId], amount: f64) -> Option<&CarbonBudget> {
        levels
            .iter()
            .map(|s| &self.budgets[s])
            .find(|b| b.consumed + b.reserved + amount > b.allocation + CARBON_EPSILON_G)
    }

    fn outcome_after(&self, levels: &[ScopeId]) -> ConsumeOutcome {
        let soft = levels
            .iter()
            .map(|s| &self.budgets[s])
            .find(|b| b.over_soft());
        let remaining = levels
            .iter()
            .map(|s| self.budgets[s].headroom())
            .fold(f64::INFINITY, f64::min);
        ConsumeOutcome {
            status: if soft.is_some() {
                ConsumeStatus::SoftBreached
            } else {
                ConsumeStatus::Ok
            },
            remaining,
            breached_scope: soft.map(|b| b.scope.clone()),
        }
    }

    fn hard_outcome(b: &CarbonBudget) -> ConsumeOutcome {
        ConsumeOutcome {
            status: ConsumeStatus::HardExceeded,
            remaining: b.headroom(),
            breached_scope: Some(b.scope.clone()),
        }
    }

    fn release(&mut self, res: &Reservation) {
        for lvl in &res.levels {
            if let Some(b) = self.budgets.get_mut(lvl) {
                b.reserved = (b.reserved - res.amount).max(0.0);
            }
        }
    }

    fn take_reservation(&mut self, id: &ReservationId) -> Result<Reservation, BudgetError> {
        match self.reservations.remove(id) {
            Some(r) => {
                self.closed.insert(id.clone());
                Ok(r)
            }
            None if self.closed.contains(id) => Err(BudgetError::AlreadySettled(id.clone())),
            None => Err(BudgetError::UnknownReservation(id.clone())),
        }
    }
}

fn check_amount(amount: f64) -> Result<(), BudgetError> {
    if amount.is_finite() && amount >= 0.0 {
        Ok(())
    } else {
        Err(BudgetError::InvalidAmount(amount))
    }
}

/// The carbon budget manager. All operations are linearizable.
#[derive(Debug)]
pub struct BudgetManager {
    book: Mutex<BudgetBook>,
    clock: Arc<dyn Clock>,
}

impl BudgetManager {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Self::from_book(BudgetBook::default(), clock)
    }

    pub fn from_book(book: BudgetBook, clock: Arc<dyn Clock>) -> Self {
        Self {
            book: Mutex::new(book),
            clock,
        }
    }

    fn lock(&self) -> MutexGuard<'_, BudgetBook> {
        self.book.lock().expect("budget lock poisoned")
    }

    pub fn book(&self) -> BudgetBook {
        self.lock().clone()
    }

    /// Create or replace a budget. Counters survive replacement unless the
    /// old budget's period has ended, in which case they reset to zero.
    pub fn set_budget(
        &self,
        scope: ScopeId,
        allocation: f64,
        soft_threshold: f64,
        period: Option<BudgetPeriod>,
    ) -> Result<CarbonBudget, BudgetError> {
        if !(allocation.is_finite() && allocation > 0.0) {
            return Err(BudgetError::InvalidAllocation(format!(
                "allocation must be > 0, got {allocation}"
            )));
        }
        if !(soft_threshold > 0.0 && soft_threshold <= 1.0) {
            return Err(BudgetError::InvalidAllocation(format!(
                "soft threshold must lie in (0, 1], got {soft_threshold}"
            )));
        }
        if let Some(p) = period {
            if p.end <= p.start {
                return Err(BudgetError::InvalidAllocation(
                    "period end must follow its start".into(),
                ));
            }
        }
        let now = self.clock.now();
        let mut book = self.lock();
        let (consumed, reserved) = match book.budgets.get(&scope) {
            Some(old) if old.period.is_some_and(|p| now >= p.end) => (0.0, 0.0),
            Some(old) => (old.consumed, old.reserved),
            None => (0.0, 0.0),
        };
        if consumed + reserved > allocation + CARBON_EPSILON_G {
            return Err(BudgetError::InvalidAllocation(format!(
                "allocation {allocation} is below the {} g already committed",
                consumed + reserved
            )));
        }
        let budget = CarbonBudget {
            scope: scope.clone(),
            allocation,
            consumed,
            reserved,
            soft_threshold,
            period,
        };
        book.budgets.insert(scope, budget.clone());
        Ok(budget)
    }

    pub fn status(&self, scope: &ScopeId) -> Result<CarbonBudget, BudgetError> {
        self.lock()
            .budgets
            .get(scope)
            .cloned()
            .ok_or_else(|| BudgetError::UnknownScope(scope.clone()))
    }

    /// Snapshot of every budget, taken atomically.
    pub fn all(&self) -> Vec<CarbonBudget> {
        self.lock().budgets.values().cloned().collect()
    }

    /// True when at least one active budget covers `scope`.
    pub fn covers(&self, scope: &ScopeId) -> bool {
        let now = self.clock.now();
        !self.lock().active_levels(scope, now).is_empty()
    }

    pub fn check_and_consume(
        &self,
        scope: &ScopeId,
        amount: f64,
    ) -> Result<ConsumeOutcome, BudgetError> {
        check_amount(amount)?;
        let now = self.clock.now();
        let mut book = self.lock();
        let levels = book.active_levels(scope, now);
        if levels.is_empty() {
            return Err(BudgetError::UnknownScope(scope.clone()));
        }
        if let Some(b) = book.first_hard_violation(&levels, amount) {
            return Ok(BudgetBook::hard_outcome(b));
        }
        for lvl in &levels {
            book.budgets.get_mut(lvl).expect("level exists").consumed += amount;
        }
        Ok(book.outcome_after(&levels))
    }

    pub fn reserve(&self, scope: &ScopeId, amount: f64) -> Result<ReserveOutcome, BudgetError> {
        self.reserve_inner(scope, amount, false)
    }

    /// Reserve without the hard check. Used only for human-approved
    /// overrides, which the caller must ledger with an override marker.
    pub fn reserve_override(
        &self,
        scope: &ScopeId,
        amount: f64,
    ) -> Result<ReserveOutcome, BudgetError> {
        self.reserve_inner(scope, amount, true)
    }

    fn reserve_inner(
        &self,
        scope: &ScopeId,
        amount: f64,
        overridden: bool,
    ) -> Result<ReserveOutcome, BudgetError> {
        check_amount(amount)?;
        let now = self.clock.now();
        let mut book = self.lock();
        let levels = book.active_levels(scope, now);
        if levels.is_empty() {
            return Err(BudgetError::UnknownScope(scope.clone()));
        }
        if !overridden {
            if let Some(b) = book.first_hard_violation(&levels, amount) {
                return Ok(ReserveOutcome {
                    outcome: BudgetBook::hard_outcome(b),
                    reservation: None,
                });
            }
        }
        for lvl in &levels {
            book.budgets.get_mut(lvl).expect("level exists").reserved += amount;
        }
        book.next_reservation += 1;
        let id = ReservationId(format!("res-{:06}", book.next_reservation));
        book.reservations.insert(
            id.clone(),
            Reservation {
                scope: scope.clone(),
                amount,
                levels: levels.clone(),
                overridden,
            },
        );
        Ok(ReserveOutcome {
            outcome: book.outcome_after(&levels),
            reservation: Some(id),
        })
    }

    /// Scope a live reservation was taken against.
    pub fn reservation_scope(&self, id: &ReservationId) -> Result<ScopeId, BudgetError> {
        let book = self.lock();
        match book.reservations.get(id) {
            Some(r) => Ok(r.scope.clone()),
            None if book.closed.contains(id) => Err(BudgetError::AlreadySettled(id.clone())),
            None => Err(BudgetError::UnknownReservation(id.clone())),
        }
    }

    pub fn is_live(&self, id: &ReservationId) -> bool {
        self.lock().reservations.contains_key(id)
    }

    pub fn live_reservations(&self) -> Vec<ReservationId> {
        self.lock().reservations.keys().cloned().collect()
    }

    /// Release a reservation and charge what was actually emitted.
    ///
    /// If `actual` does not fit in the remaining headroom the charge is capped
    /// at the smallest headroom over the chain and the rest is reported as
    /// overflow. Overridden reservations are charged in full.
    pub fn settle(&self, id: &ReservationId, actual: f64) -> Result<SettleOutcome, BudgetError> {
        check_amount(actual)?;
        let now = self.clock.now();
        let mut book = self.lock();
        let res = book.take_reservation(id)?;
        book.release(&res);
        let levels = book.active_levels(&res.scope, now);
        if levels.is_empty() {
            return Err(BudgetError::UnknownScope(res.scope));
        }
        let violation = book.first_hard_violation(&levels, actual).cloned();
        let (charged, hard) = match violation {
            Some(b) if !res.overridden => {
                let headroom = levels
                    .iter()
                    .map(|s| book.budgets[s].headroom())
                    .fold(f64::INFINITY, f64::min)
                    .max(0.0);
                (headroom.min(actual), Some(b))
            }
            _ => (actual, None),
        };
        for lvl in &levels {
            book.budgets.get_mut(lvl).expect("level exists").consumed += charged;
        }
        let outcome = match hard {
            Some(b) => ConsumeOutcome {
                status: ConsumeStatus::HardExceeded,
                remaining: book.budgets[&b.scope].headroom(),
                breached_scope: Some(b.scope),
            },
            None => book.outcome_after(&levels),
        };
        Ok(SettleOutcome {
            outcome,
            charged,
            overflow: actual - charged,
        })
    }

    /// Make sure reservation ids issued from now on are numbered above `seen`.
    pub fn skip_reservation_ids(&self, seen: u64) {
        let mut book = self.lock();
        book.next_reservation = book.next_reservation.max(seen);
    }

    /// Release a reservation without charging anything.
    pub fn cancel(&self, id: &ReservationId) -> Result<(), BudgetError> {
        let mut book = self.lock();
        let res = book.take_reservation(id)?;
        book.release(&res);
        Ok(())
    }
}
