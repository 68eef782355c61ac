//! Command-line client for the gate service and a deterministic workflow
//! simulator.

pub mod client;
pub mod simulate;
pub mod trace;

use cagg_core::engine::EngineError;
use cagg_core::Verdict;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("server returned {status} ({code}): {message}")]
    Http {
        status: u16,
        code: String,
        message: String,
    },
    #[error("cannot reach the gate service: {0}")]
    Unreachable(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
    #[error("infeasible policy: {0}")]
    InfeasiblePolicy(String),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
}

/// Process exit status for a gate verdict, so CI scripts can branch on it.
pub fn verdict_exit_code(v: &Verdict) -> u8 {
    match v {
        Verdict::Allow | Verdict::Downgrade { .. } => 0,
        Verdict::Defer { .. } => 10,
        Verdict::Escalate { .. } => 20,
        Verdict::Deny => 30,
    }
}
