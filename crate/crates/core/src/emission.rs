//! Operational-carbon estimation and the assurance-per-carbon metric.
//!
//! Energy is activity times intensity-of-use (joules per token or watts times
//! seconds), converted to kWh. Carbon is `energy x PUE x grid intensity`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::ModelTier;

const JOULES_PER_KWH: f64 = 3_600_000.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmissionError {
    #[error("grid intensity must be > 0, got {0}")]
    NonPositiveIntensity(f64),
    #[error("PUE must be >= 1, got {0}")]
    InvalidPue(f64),
    #[error("duration must be finite and >= 0, got {0}")]
    InvalidDuration(f64),
    #[error("cannot combine assurance over an empty plan")]
    EmptyPlan,
    #[error("assurance {0} outside [0, 1]")]
    InvalidAssurance(f64),
    #[error("assurance per carbon is undefined for carbon {0} <= 0")]
    ZeroCarbon(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmissionBasis {
    TokenBased,
    DurationBased,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmissionEstimate {
    /// kWh.
    pub energy: f64,
    /// gCO2e.
    pub carbon: f64,
    pub basis: EmissionBasis,
}

fn check_factors(pue: f64, intensity: f64) -> Result<(), EmissionError> {
    if !(intensity.is_finite() && intensity > 0.0) {
        return Err(EmissionError::NonPositiveIntensity(intensity));
    }
    if !(pue.is_finite() && pue >= 1.0) {
        return Err(EmissionError::InvalidPue(pue));
    }
    Ok(())
}

pub fn estimate_inference(
    tokens_total: u64,
    tier: &ModelTier,
    pue: f64,
    intensity: f64,
) -> Result<EmissionEstimate, EmissionError> {
    check_factors(pue, intensity)?;
    let energy = tokens_total as f64 * tier.energy_per_token / JOULES_PER_KWH;
    Ok(EmissionEstimate {
        energy,
        carbon: energy * pue * intensity,
        basis: EmissionBasis::TokenBased,
    })
}

pub fn estimate_duration(
    duration: f64,
    tier: &ModelTier,
    pue: f64,
    intensity: f64,
) -> Result<EmissionEstimate, EmissionError> {
    check_factors(pue, intensity)?;
    if !(duration.is_finite() && duration >= 0.0) {
        return Err(EmissionError::InvalidDuration(duration));
    }
    let energy = duration * tier.avg_power / JOULES_PER_KWH;
    Ok(EmissionEstimate {
        energy,
        carbon: energy * pue * intensity,
        basis: EmissionBasis::DurationBased,
    })
}

/// Probability that at least one executed tier catches a defect, assuming
/// independent detection: `1 - prod(1 - a_i)`.
pub fn combined_assurance<'a, I>(tiers_executed: I) -> Result<f64, EmissionError>
where
    I: IntoIterator<Item = &'a ModelTier>,
{
    let mut miss = 1.0;
    let mut any = false;
    for tier in tiers_executed {
        if !(0.0..=1.0).contains(&tier.assurance_value) {
            return Err(EmissionError::InvalidAssurance(tier.assurance_value));
        }
        miss *= 1.0 - tier.assurance_value;
        any = true;
    }
    if !any {
        return Err(EmissionError::EmptyPlan);
    }
    Ok((1.0 - miss).clamp(0.0, 1.0))
}

/// Validation confidence gained per gram of CO2e spent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssurancePerCarbon {
    pub assurance: f64,
    /// gCO2e.
    pub carbon: f64,
    /// 1/gCO2e.
    pub ratio: f64,
}

pub fn assurance_per_carbon(
    assurance: f64,
    carbon: f64,
) -> Result<AssurancePerCarbon, EmissionError> {
    if !(carbon.is_finite() && carbon > 0.0) {
        return Err(EmissionError::ZeroCarbon(carbon));
    }
    if !(assurance.is_finite() && assurance > 0.0 && assurance <= 1.0) {
        return Err(EmissionError::InvalidAssurance(assurance));
    }
    Ok(AssurancePerCarbon {
        assurance,
        carbon,
        ratio: assurance / carbon,
    })
}
