//! Two ways to reach a gate engine: over HTTP, or in-process on a local data
//! directory. Commands are written against [`Gateway`] and do not care which.

use std::time::Duration;

use cagg_core::engine::{EngineError, IntensityNow, RecordedEvents, WorkloadReport};
use cagg_core::ledger::ExportFormat;
use cagg_core::orchestrator::RegenerationLoopState;
use cagg_core::policy::{GateRequest, PolicyConfig, ReviewItem, ReviewResolution};
use cagg_core::{AuditReport, CarbonBudget, Engine, GateDecision, ScopeId};
use reqwest::blocking::{Client, RequestBuilder};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::json;

use crate::CliError;

pub trait Gateway {
    fn check_gate(&self, request: &GateRequest) -> Result<GateDecision, CliError>;
    fn record(&self, report: &WorkloadReport) -> Result<RecordedEvents, CliError>;
    fn set_budget(
        &self,
        scope: &ScopeId,
        allocation: f64,
        soft_threshold: f64,
    ) -> Result<CarbonBudget, CliError>;
    fn budget(&self, scope: &ScopeId) -> Result<CarbonBudget, CliError>;
    fn budgets(&self) -> Result<Vec<CarbonBudget>, CliError>;
    fn audit(&self) -> Result<AuditReport, CliError>;
    fn export_lines(&self) -> Result<Vec<u8>, CliError>;
    fn loop_attempt(
        &self,
        loop_id: &str,
        scope: &ScopeId,
    ) -> Result<RegenerationLoopState, CliError>;
    fn loop_justify(
        &self,
        loop_id: &str,
        approver: &str,
        text: &str,
        extension: u32,
    ) -> Result<RegenerationLoopState, CliError>;
    fn loop_terminate(
        &self,
        loop_id: &str,
        approver: &str,
        reason: &str,
    ) -> Result<RegenerationLoopState, CliError>;
    fn loop_state(&self, loop_id: &str) -> Result<RegenerationLoopState, CliError>;
    fn loops(&self) -> Result<Vec<RegenerationLoopState>, CliError>;
    fn pending_reviews(&self) -> Result<Vec<ReviewItem>, CliError>;
    fn decide_review(
        &self,
        review_id: &str,
        resolution: &ReviewResolution,
    ) -> Result<GateDecision, CliError>;
    fn policy(&self) -> Result<PolicyConfig, CliError>;
    fn intensity_now(&self) -> Result<IntensityNow, CliError>;
}

pub struct LocalGateway {
    engine: Engine,
}

impl LocalGateway {
    pub fn new(engine: Engine) -> Self {
        Self { engine }
    }
}

fn local<T>(r: Result<T, EngineError>) -> Result<T, CliError> {
    r.map_err(CliError::Engine)
}

impl Gateway for LocalGateway {
    fn check_gate(&self, request: &GateRequest) -> Result<GateDecision, CliError> {
        local(self.engine.check_gate(request))
    }

    fn record(&self, report: &WorkloadReport) -> Result<RecordedEvents, CliError> {
        local(self.engine.record_event(report))
    }

    fn set_budget(
        &self,
        scope: &ScopeId,
        allocation: f64,
        soft_threshold: f64,
    ) -> Result<CarbonBudget, CliError> {
        local(
            self.engine
                .set_budget(scope.clone(), allocation, soft_threshold, None),
        )
    }

    fn budget(&self, scope: &ScopeId) -> Result<CarbonBudget, CliError> {
        local(self.engine.budget_status(scope))
    }

    fn budgets(&self) -> Result<Vec<CarbonBudget>, CliError> {
        Ok(self.engine.all_budgets())
    }

    fn audit(&self) -> Result<AuditReport, CliError> {
        local(self.engine.audit())
    }

    fn export_lines(&self) -> Result<Vec<u8>, CliError> {
        local(self.engine.export(ExportFormat::Lines))
    }

    fn loop_attempt(
        &self,
        loop_id: &str,
        scope: &ScopeId,
    ) -> Result<RegenerationLoopState, CliError> {
        local(self.engine.loop_attempt(loop_id, scope))
    }

    fn loop_justify(
        &self,
        loop_id: &str,
        approver: &str,
        text: &str,
        extension: u32,
    ) -> Result<RegenerationLoopState, CliError> {
        local(self.engine.loop_justify(loop_id, approver, text, extension))
    }

    fn loop_terminate(
        &self,
        loop_id: &str,
        approver: &str,
        reason: &str,
    ) -> Result<RegenerationLoopState, CliError> {
        local(self.engine.loop_terminate(loop_id, approver, reason))
    }

    fn loop_state(&self, loop_id: &str) -> Result<RegenerationLoopState, CliError> {
        local(self.engine.loop_state(loop_id))
    }

    fn loops(&self) -> Result<Vec<RegenerationLoopState>, CliError> {
        Ok(self.engine.all_loops())
    }

    fn pending_reviews(&self) -> Result<Vec<ReviewItem>, CliError> {
        Ok(self.engine.pending_reviews())
    }

    fn decide_review(
        &self,
        review_id: &str,
        resolution: &ReviewResolution,
    ) -> Result<GateDecision, CliError> {
        local(self.engine.resolve_review(review_id, resolution))
    }

    fn policy(&self) -> Result<PolicyConfig, CliError> {
        Ok(self.engine.config().as_ref().clone())
    }

    fn intensity_now(&self) -> Result<IntensityNow, CliError> {
        local(self.engine.intensity_now())
    }
}

pub struct HttpGateway {
    base: String,
    token: Option<String>,
    http: Client,
}

#[derive(Debug, Deserialize)]
struct ErrorBody {
    error: String,
    message: String,
}

impl HttpGateway {
    pub fn new(base: &str, token: Option<String>) -> Result<Self, CliError> {
        let http = Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| CliError::Unreachable(e.to_string()))?;
        Ok(Self {
            base: base.trim_end_matches('/').to_string(),
            token,
            http,
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    fn send(&self, req: RequestBuilder) -> Result<reqwest::blocking::Response, CliError> {
        let req = match &self.token {
            Some(t) => req.bearer_auth(t),
            None => req,
        };
        let resp = req
            .send()
            .map_err(|e| CliError::Unreachable(e.to_string()))?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status().as_u16();
        let text = resp.text().unwrap_or_default();
        let (code, message) = match serde_json::from_str::<ErrorBody>(&text) {
            Ok(b) => (b.error, b.message),
            Err(_) => ("http_error".to_string(), text),
        };
        Err(CliError::Http {
            status,
            code,
            message,
        })
    }

    fn json<T: DeserializeOwned>(&self, req: RequestBuilder) -> Result<T, CliError> {
        self.send(req)?
            .json()
            .map_err(|e| CliError::Unreachable(format!("unreadable response: {e}")))
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, CliError> {
        self.json(self.http.get(self.url(path)))
    }

    fn post<T: DeserializeOwned>(
        &self,
        path: &str,
        body: &impl serde::Serialize,
    ) -> Result<T, CliError> {
        self.json(self.http.post(self.url(path)).json(body))
    }
}

/// Percent-encode a path segment.
fn segment(raw: &str) -> String {
    raw.bytes()
        .map(|b| match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' | b':' => {
                (b as char).to_string()
            }
            _ => format!("%{b:02X}"),
        })
        .collect()
}

impl Gateway for HttpGateway {
    fn check_gate(&self, request: &GateRequest) -> Result<GateDecision, CliError> {
        self.post("/gates/check", request)
    }

    fn record(&self, report: &WorkloadReport) -> Result<RecordedEvents, CliError> {
        self.post("/events", report)
    }

    fn set_budget(
        &self,
        scope: &ScopeId,
        allocation: f64,
        soft_threshold: f64,
    ) -> Result<CarbonBudget, CliError> {
        let body = json!({"allocation": allocation, "soft_threshold": soft_threshold});
        self.json(
            self.http
                .put(self.url(&format!("/budgets/{scope}")))
                .json(&body),
        )
    }

    fn budget(&self, scope: &ScopeId) -> Result<CarbonBudget, CliError> {
        self.get(&format!("/budgets/{scope}"))
    }

    fn budgets(&self) -> Result<Vec<CarbonBudget>, CliError> {
        self.get("/budgets")
    }

    fn audit(&self) -> Result<AuditReport, CliError> {
        self.get("/ledger/audit?format=summary")
    }

    fn export_lines(&self) -> Result<Vec<u8>, CliError> {
        let resp = self.send(self.http.get(self.url("/ledger/audit?format=lines")))?;
        resp.bytes()
            .map(|b| b.to_vec())
            .map_err(|e| CliError::Unreachable(e.to_string()))
    }

    fn loop_attempt(
        &self,
        loop_id: &str,
        scope: &ScopeId,
    ) -> Result<RegenerationLoopState, CliError> {
        self.post(
            &format!("/loops/{}/attempt", segment(loop_id)),
            &json!({"scope": scope}),
        )
    }

    fn loop_justify(
        &self,
        loop_id: &str,
        approver: &str,
        text: &str,
        extension: u32,
    ) -> Result<RegenerationLoopState, CliError> {
        let body = json!({"approver": approver, "text": text, "extension": extension});
        self.post(&format!("/loops/{}/justify", segment(loop_id)), &body)
    }

    fn loop_terminate(
        &self,
        loop_id: &str,
        approver: &str,
        reason: &str,
    ) -> Result<RegenerationLoopState, CliError> {
        let body = json!({"approver": approver, "reason": reason});
        self.post(&format!("/loops/{}/terminate", segment(loop_id)), &body)
    }

    fn loop_state(&self, loop_id: &str) -> Result<RegenerationLoopState, CliError> {
        self.get(&format!("/loops/{}", segment(loop_id)))
    }

    fn loops(&self) -> Result<Vec<RegenerationLoopState>, CliError> {
        self.get("/loops")
    }

    fn pending_reviews(&self) -> Result<Vec<ReviewItem>, CliError> {
        self.get("/reviews/pending")
    }

    fn decide_review(
        &self,
        review_id: &str,
        resolution: &ReviewResolution,
    ) -> Result<GateDecision, CliError> {
        self.post(
            &format!("/reviews/{}/decision", segment(review_id)),
            resolution,
        )
    }

    fn policy(&self) -> Result<PolicyConfig, CliError> {
        self.get("/policy")
    }

    fn intensity_now(&self) -> Result<IntensityNow, CliError> {
        self.get("/intensity/now")
    }
}
