//! Domain types shared by every module.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::budget::ReservationId;
use crate::emission::EmissionBasis;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TypeError {
    #[error("invalid scope: {0}")]
    InvalidScope(String),
    #[error("model ladder is empty")]
    EmptyLadder,
    #[error("invalid model tier `{name}`: {reason}")]
    InvalidTier { name: String, reason: String },
    #[error("invalid workload event `{event_id}`: {reason}")]
    InvalidEvent { event_id: String, reason: String },
    #[error("risk score {0} outside [0, 1]")]
    InvalidRisk(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeKind {
    Release,
    Pipeline,
    PullRequest,
}

impl ScopeKind {
    fn tag(self) -> &'static str {
        match self {
            Self::Release => "release",
            Self::Pipeline => "pipeline",
            Self::PullRequest => "pr",
        }
    }

    fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "release" => Some(Self::Release),
            "pipeline" => Some(Self::Pipeline),
            "pr" | "pull_request" => Some(Self::PullRequest),
            _ => None,
        }
    }

    /// The only kind allowed as a direct parent.
    fn parent_kind(self) -> Option<Self> {
        match self {
            Self::Release => None,
            Self::Pipeline => Some(Self::Release),
            Self::PullRequest => Some(Self::Pipeline),
        }
    }
}

/// A budgeting scope: a release, a pipeline under a release, or a pull
/// request under a pipeline.
///
/// The textual form lists the chain root first, e.g.
/// `release:v2/pipeline:ci/pr:123`. That form is also the JSON encoding and the
/// URL path segment used by the service.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ScopeId {
    kind: ScopeKind,
    id: String,
    parent: Option<Box<ScopeId>>,
}

impl ScopeId {
    pub fn new(
        kind: ScopeKind,
        id: impl Into<String>,
        parent: Option<ScopeId>,
    ) -> Result<Self, TypeError> {
        let id = id.into();
        if id.is_empty() || id.contains('/') || id.chars().any(char::is_whitespace) {
            return Err(TypeError::InvalidScope(format!(
                "identifier `{id}` must be non-empty without '/' or whitespace"
            )));
        }
        if let Some(p) = &parent {
            if kind.parent_kind() != Some(p.kind) {
                return Err(TypeError::InvalidScope(format!(
                    "a {} cannot be nested under a {}",
                    kind.tag(),
                    p.kind.tag()
                )));
            }
        }
        Ok(Self {
            kind,
            id,
            parent: parent.map(Box::new),
        })
    }

    pub fn release(id: impl Into<String>) -> Result<Self, TypeError> {
        Self::new(ScopeKind::Release, id, None)
    }

    pub fn pipeline(id: impl Into<String>, release: Option<ScopeId>) -> Result<Self, TypeError> {
        Self::new(ScopeKind::Pipeline, id, release)
    }

    pub fn pull_request(
        id: impl Into<String>,
        pipeline: Option<ScopeId>,
    ) -> Result<Self, TypeError> {
        Self::new(ScopeKind::PullRequest, id, pipeline)
    }

    pub fn kind(&self) -> ScopeKind {
        self.kind
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn parent(&self) -> Option<&ScopeId> {
        self.parent.as_deref()
    }

    /// This scope followed by its ancestors, leaf first.
    pub fn chain(&self) -> impl Iterator<Item = &ScopeId> {
        std::iter::successors(Some(self), |s| s.parent())
    }

    pub fn depth(&self) -> usize {
        self.chain().count() - 1
    }

    /// True when `ancestor` is this scope or appears in its parent chain.
    pub fn is_within(&self, ancestor: &ScopeId) -> bool {
        self.chain().any(|s| s == ancestor)
    }
}

impl fmt::Display for ScopeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(p) = &self.parent {
            write!(f, "{p}/")?;
        }
        write!(f, "{}:{}", self.kind.tag(), self.id)
    }
}

impl FromStr for ScopeId {
    type Err = TypeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut current: Option<ScopeId> = None;
        for segment in s.split('/') {
            let (tag, id) = segment.split_once(':').ok_or_else(|| {
                TypeError::InvalidScope(format!("segment `{segment}` lacks `kind:`"))
            })?;
            let kind = ScopeKind::from_tag(tag)
                .ok_or_else(|| TypeError::InvalidScope(format!("unknown scope kind `{tag}`")))?;
            current = Some(ScopeId::new(kind, id, current)?);
        }
        current.ok_or_else(|| TypeError::InvalidScope("empty scope".into()))
    }
}

impl Serialize for ScopeId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ScopeId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One rung of the model escalation ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelTier {
    pub name: String,
    /// Joules per processed token.
    pub energy_per_token: f64,
    /// Mean draw in watts while running duration-based workloads.
    pub avg_power: f64,
    /// Probability that validation at this tier catches a defect.
    pub assurance_value: f64,
    /// Risk above which work at this tier escalates to the next tier up.
    #[serde(default = "default_escalation_threshold")]
    pub escalation_threshold: f64,
}

fn default_escalation_threshold() -> f64 {
    1.0
}

impl ModelTier {
    pub fn new(
        name: impl Into<String>,
        energy_per_token: f64,
        avg_power: f64,
        assurance_value: f64,
    ) -> Self {
        Self {
            name: name.into(),
            energy_per_token,
            avg_power,
            assurance_value,
            escalation_threshold: 1.0,
        }
    }

    pub fn with_escalation_threshold(mut self, threshold: f64) -> Self {
        self.escalation_threshold = threshold;
        self
    }

    fn validate(&self) -> Result<(), TypeError> {
        let bad = |reason: &str| {
            Err(TypeError::InvalidTier {
                name: self.name.clone(),
                reason: reason.to_string(),
            })
        };
        if self.name.is_empty() {
            return bad("empty name");
        }
        if !(self.energy_per_token.is_finite() && self.energy_per_token > 0.0) {
            return bad("energy_per_token must be > 0");
        }
        if !(self.avg_power.is_finite() && self.avg_power > 0.0) {
            return bad("avg_power must be > 0");
        }
        if !(0.0..=1.0).contains(&self.assurance_value) {
            return bad("assurance_value must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.escalation_threshold) {
            return bad("escalation_threshold must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Tiers ordered from cheapest to most capable.
///
/// Construction enforces strictly increasing `energy_per_token` and
/// `assurance_value`, and unique names.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ModelLadder(Vec<ModelTier>);

impl ModelLadder {
    pub fn new(tiers: Vec<ModelTier>) -> Result<Self, TypeError> {
        if tiers.is_empty() {
            return Err(TypeError::EmptyLadder);
        }
        for t in &tiers {
            t.validate()?;
        }
        for pair in tiers.windows(2) {
            let (lo, hi) = (&pair[0], &pair[1]);
            if hi.energy_per_token <= lo.energy_per_token {
                return Err(TypeError::InvalidTier {
                    name: hi.name.clone(),
                    reason: format!("energy_per_token must exceed that of `{}`", lo.name),
                });
            }
            if hi.assurance_value <= lo.assurance_value {
                return Err(TypeError::InvalidTier {
                    name: hi.name.clone(),
                    reason: format!("assurance_value must exceed that of `{}`", lo.name),
                });
            }
        }
        for (i, t) in tiers.iter().enumerate() {
            if tiers[..i].iter().any(|o| o.name == t.name) {
                return Err(TypeError::InvalidTier {
                    name: t.name.clone(),
                    reason: "duplicate name".into(),
                });
            }
        }
        Ok(Self(tiers))
    }

    pub fn tiers(&self) -> &[ModelTier] {
        &self.0
    }

    pub fn lowest(&self) -> &ModelTier {
        &self.0[0]
    }

    pub fn highest(&self) -> &ModelTier {
        self.0.last().expect("ladder is non-empty")
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.0.iter().position(|t| t.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&ModelTier> {
        self.0.iter().find(|t| t.name == name)
    }

    pub fn below(&self, name: &str) -> Option<&ModelTier> {
        match self.position(name)? {
            0 => None,
            i => Some(&self.0[i - 1]),
        }
    }

    pub fn above(&self, name: &str) -> Option<&ModelTier> {
        self.position(name).and_then(|i| self.0.get(i + 1))
    }
}

impl<'de> Deserialize<'de> for ModelLadder {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let tiers = Vec::<ModelTier>::deserialize(deserializer)?;
        ModelLadder::new(tiers).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadKind {
    Inference,
    ValidationRun,
    Regeneration,
}

impl WorkloadKind {
    /// Inference and regeneration are token-driven; validation runs are
    /// time-driven.
    pub fn basis(self) -> EmissionBasis {
        match self {
            Self::Inference | Self::Regeneration => EmissionBasis::TokenBased,
            Self::ValidationRun => EmissionBasis::DurationBased,
        }
    }
}

/// One metered unit of AI work.
///
/// Field order is the canonical serialization order used for ledger hashing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadEvent {
    pub event_id: String,
    pub scope: ScopeId,
    pub kind: WorkloadKind,
    pub tier: String,
    pub tokens_in: u64,
    pub tokens_out: u64,
    /// Seconds.
    pub duration: f64,
    pub timestamp: DateTime<Utc>,
    /// kWh.
    pub energy: f64,
    /// gCO2e.
    pub carbon: f64,
    /// gCO2e/kWh.
    pub intensity_at_time: f64,
    pub pue: f64,
    pub reservation: Option<ReservationId>,
}

impl WorkloadEvent {
    pub fn validate(&self) -> Result<(), TypeError> {
        let bad = |reason: String| {
            Err(TypeError::InvalidEvent {
                event_id: self.event_id.clone(),
                reason,
            })
        };
        if self.event_id.is_empty() {
            return bad("empty event_id".into());
        }
        for (name, v) in [
            ("duration", self.duration),
            ("energy", self.energy),
            ("carbon", self.carbon),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0"));
            }
        }
        if !(self.intensity_at_time.is_finite() && self.intensity_at_time > 0.0) {
            return bad("intensity_at_time must be > 0".into());
        }
        if !(self.pue.is_finite() && self.pue >= 1.0) {
            return bad("pue must be >= 1".into());
        }
        let expected = self.energy * self.pue * self.intensity_at_time;
        if (self.carbon - expected).abs() > 1e-9 * expected.abs() {
            return bad(format!(
                "carbon {} != energy x pue x intensity {}",
                self.carbon, expected
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> ScopeId {
        let r = ScopeId::release("v2").unwrap();
        let p = ScopeId::pipeline("ci", Some(r)).unwrap();
        ScopeId::pull_request("123", Some(p)).unwrap()
    }

    #[test]
    fn scope_text_form_round_trips() {
        let pr = chain();
        assert_eq!(pr.to_string(), "release:v2/pipeline:ci/pr:123");
        assert_eq!(pr.to_string().parse::<ScopeId>().unwrap(), pr);
        assert_eq!(pr.depth(), 2);
        let json = serde_json::to_string(&pr).unwrap();
        assert_eq!(json, "\"release:v2/pipeline:ci/pr:123\"");
    }

    #[test]
    fn scope_nesting_rules() {
        let r = ScopeId::release("v2").unwrap();
        assert!(ScopeId::pull_request("1", Some(r.clone())).is_err());
        assert!(ScopeId::new(ScopeKind::Release, "x", Some(r)).is_err());
        assert!("pr:1/pipeline:a".parse::<ScopeId>().is_err());
        assert!("".parse::<ScopeId>().is_err());
        assert!(ScopeId::release("").is_err());
        // parentless PRs and pipelines are allowed
        assert!("pr:77".parse::<ScopeId>().is_ok());
    }

    #[test]
    fn within_follows_parent_chain() {
        let pr = chain();
        let release = ScopeId::release("v2").unwrap();
        assert!(pr.is_within(&release));
        assert!(pr.is_within(&pr));
        assert!(!release.is_within(&pr));
        assert!(!pr.is_within(&ScopeId::release("v3").unwrap()));
    }

    #[test]
    fn ladder_requires_strict_ordering() {
        let ok = ModelLadder::new(vec![
            ModelTier::new("small", 0.3, 150.0, 0.6),
            ModelTier::new("large", 3.0, 1000.0, 0.9),
        ])
        .unwrap();
        assert_eq!(ok.lowest().name, "small");
        assert_eq!(ok.below("large").unwrap().name, "small");
        assert!(ok.below("small").is_none());
        assert!(ok.above("large").is_none());

        assert_eq!(ModelLadder::new(vec![]), Err(TypeError::EmptyLadder));
        assert!(ModelLadder::new(vec![
            ModelTier::new("a", 1.0, 100.0, 0.6),
            ModelTier::new("b", 1.0, 100.0, 0.7),
        ])
        .is_err());
        assert!(ModelLadder::new(vec![
            ModelTier::new("a", 1.0, 100.0, 0.7),
            ModelTier::new("b", 2.0, 100.0, 0.7),
        ])
        .is_err());
        assert!(ModelLadder::new(vec![ModelTier::new("a", 0.0, 100.0, 0.7)]).is_err());
    }
}
