//! Carbon-aware governance gates for GenAI-assisted development pipelines.
//!
//! The crate is organised around a measure → decide → enforce loop:
//!
//! ```text
//!   workload report ──► estimate ──► ledger (hash-chained evidence)
//!                                        │
//!   gate request ──► policy::evaluate ◄──┼── budget (hierarchical reservations)
//!                        │               ├── intensity (grid signal, windows)
//!                        │               └── orchestrator (plans, regeneration loops)
//!                        ▼
//!                  GateDecision ──► reviews (human escalation)
//! ```
//!
//! [`engine::Engine`] wires the modules together with persistence and is what
//! the HTTP service and the CLI drive.

pub mod budget;
pub mod clock;
pub mod emission;
pub mod engine;
pub mod intensity;
pub mod ledger;
pub mod orchestrator;
pub mod policy;
pub mod types;

pub use budget::{BudgetManager, CarbonBudget, ConsumeOutcome, ConsumeStatus, ReservationId};
pub use clock::{Clock, SystemClock, VirtualClock};
pub use emission::{
    assurance_per_carbon, combined_assurance, estimate_duration, estimate_inference,
    AssurancePerCarbon, EmissionBasis, EmissionEstimate,
};
pub use engine::Engine;
pub use intensity::{best_window, IntensitySeries, WindowChoice};
pub use ledger::{AuditReport, Ledger, Payload, ProvenanceRecord};
pub use orchestrator::{plan_validation, RiskSignal, ValidationPlan};
pub use policy::{GateDecision, GateKind, GateRequest, PolicyConfig, Verdict};
pub use types::{ModelLadder, ModelTier, ScopeId, ScopeKind, WorkloadEvent, WorkloadKind};

/// Absolute tolerance, in grams CO2e, used for every budget comparison.
pub const CARBON_EPSILON_G: f64 = 1e-9;
