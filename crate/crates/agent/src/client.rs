//! Outbound HTTP calls to the control plane.

use std::time::Duration;

use reqwest::blocking::{Client, Response};
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde::Serialize;
use vqpu_core::task::{
    ClaimRequest, ClaimResponse, HeartbeatAck, HeartbeatRequest, HeartbeatResponse, JobAccounting,
    ReportCompletedRequest, ReportFailedRequest, ReportRunningRequest,
};
use vqpu_core::{ErrorCode, ErrorEnvelope, SimulationResult, TaskRecord};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    /// The server could not be reached or answered garbage; worth retrying.
    #[error("transport error: {0}")]
    Transport(String),
    /// The server refused the request.
    #[error("{status}: {} {}", .envelope.code, .envelope.message)]
    Api { status: u16, envelope: ErrorEnvelope },
}

impl ClientError {
    pub fn code(&self) -> Option<ErrorCode> {
        match self {
            ClientError::Api { envelope, .. } => Some(envelope.code),
            ClientError::Transport(_) => None,
        }
    }

    /// Transport failures and server-side faults may succeed on retry.
    pub fn is_transient(&self) -> bool {
        match self {
            ClientError::Transport(_) => true,
            ClientError::Api { status, .. } => *status >= 500,
        }
    }
}

pub struct ControlPlane {
    base: String,
    key: String,
    agent_id: String,
    http: Client,
}

impl ControlPlane {
    pub fn new(base: &str, key: &str, agent_id: &str) -> Result<Self, ClientError> {
        let http = Client::builder()
            .timeout(Duration::from_secs(30))
            .connect_timeout(Duration::from_secs(5))
            .build()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok(Self {
            base: base.trim_end_matches('/').to_string(),
            key: key.to_string(),
            agent_id: agent_id.to_string(),
            http,
        })
    }

    pub fn agent_id(&self) -> &str {
        &self.agent_id
    }

    fn send(&self, req: reqwest::blocking::RequestBuilder) -> Result<Response, ClientError> {
        let resp = req.bearer_auth(&self.key).send().map_err(|e| ClientError::Transport(e.to_string()))?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status().as_u16();
        let text = resp.text().unwrap_or_default();
        match serde_json::from_str::<ErrorEnvelope>(&text) {
            Ok(envelope) => Err(ClientError::Api { status, envelope }),
            Err(_) if status >= 500 => Err(ClientError::Transport(format!("HTTP {status}: {text}"))),
            Err(_) => Err(ClientError::Api {
                status,
                envelope: ErrorEnvelope::new(ErrorCode::InvalidRequest, format!("HTTP {status}: {text}")),
            }),
        }
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        self.send(self.http.post(format!("{}{path}", self.base)).json(body))?
            .json()
            .map_err(|e| ClientError::Transport(e.to_string()))
    }

    /// `None` when the queue is empty.
    pub fn claim(&self) -> Result<Option<ClaimResponse>, ClientError> {
        let resp = self.send(
            self.http
                .post(format!("{}/agent/claim", self.base))
                .json(&ClaimRequest { agent_id: self.agent_id.clone() }),
        )?;
        if resp.status() == StatusCode::NO_CONTENT {
            return Ok(None);
        }
        resp.json().map(Some).map_err(|e| ClientError::Transport(e.to_string()))
    }

    pub fn report_running(&self, task_id: &str, job_id: &str) -> Result<TaskRecord, ClientError> {
        let body = ReportRunningRequest { agent_id: self.agent_id.clone(), scheduler_job_id: job_id.to_string() };
        self.post(&format!("/agent/tasks/{task_id}/running"), &body)
    }

    pub fn report_completed(
        &self,
        task_id: &str,
        result: SimulationResult,
        accounting: Option<JobAccounting>,
    ) -> Result<TaskRecord, ClientError> {
        let body = ReportCompletedRequest { agent_id: self.agent_id.clone(), result, accounting };
        self.post(&format!("/agent/tasks/{task_id}/completed"), &body)
    }

    pub fn report_failed(
        &self,
        task_id: &str,
        error: ErrorEnvelope,
        accounting: Option<JobAccounting>,
    ) -> Result<TaskRecord, ClientError> {
        let body = ReportFailedRequest { agent_id: self.agent_id.clone(), error, accounting };
        self.post(&format!("/agent/tasks/{task_id}/failed"), &body)
    }

    pub fn heartbeat(&self, task_ids: Vec<String>) -> Result<Vec<HeartbeatAck>, ClientError> {
        let body = HeartbeatRequest { agent_id: self.agent_id.clone(), task_ids };
        self.post::<_, HeartbeatResponse>("/agent/heartbeat", &body).map(|r| r.acks)
    }

    /// RUNNING tasks the server attributes to this agent.
    pub fn owned(&self) -> Result<Vec<TaskRecord>, ClientError> {
        self.send(self.http.get(format!("{}/agent/owned", self.base)).query(&[("agent_id", &self.agent_id)]))?
            .json()
            .map_err(|e| ClientError::Transport(e.to_string()))
    }
}
