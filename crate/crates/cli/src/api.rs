//! Blocking client for the public HTTP API, including the event stream.

use std::io::{BufRead, BufReader};
use std::sync::mpsc::{self, Receiver};
use std::thread;
use std::time::Duration;

use reqwest::blocking::{Client, RequestBuilder, Response};
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use vqpu_core::task::{CacheStats, ForceFailRequest, HealthReport, SubmitRequest, ViabilityVerdict};
use vqpu_core::{DeviceSnapshot, ErrorCode, ErrorEnvelope, LifecycleEvent, TaskRecord};

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("cannot reach server: {0}")]
    Transport(String),
    #[error("{} ({status}): {}", .envelope.code, .envelope.message)]
    Server { status: u16, envelope: ErrorEnvelope },
}

impl ApiError {
    pub fn code(&self) -> Option<ErrorCode> {
        match self {
            ApiError::Server { envelope, .. } => Some(envelope.code),
            ApiError::Transport(_) => None,
        }
    }
}

pub type ApiResult<T> = Result<T, ApiError>;

#[derive(Clone)]
pub struct Api {
    base: String,
    key: String,
    http: Client,
    stream_http: Client,
}

/// One server-sent event frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SseFrame {
    pub id: Option<u64>,
    pub event: String,
    pub data: String,
}

impl SseFrame {
    pub fn lifecycle(&self) -> Option<LifecycleEvent> {
        serde_json::from_str(&self.data).ok()
    }
}

fn transport(e: impl std::fmt::Display) -> ApiError {
    ApiError::Transport(e.to_string())
}

impl Api {
    pub fn new(base: &str, key: &str) -> Self {
        let http = Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .expect("HTTP client builds");
        let stream_http = Client::builder().build().expect("HTTP client builds");
        Self { base: base.trim_end_matches('/').to_string(), key: key.to_string(), http, stream_http }
    }

    /// Same server, different credentials.
    pub fn with_key(&self, key: &str) -> Self {
        Self { key: key.to_string(), ..self.clone() }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn send(&self, req: RequestBuilder) -> ApiResult<Response> {
        let resp = req.bearer_auth(&self.key).send().map_err(transport)?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status().as_u16();
        let body = resp.text().unwrap_or_default();
        let envelope = serde_json::from_str(&body)
            .unwrap_or_else(|_| ErrorEnvelope::new(ErrorCode::InvalidRequest, format!("HTTP {status}: {body}")));
        Err(ApiError::Server { status, envelope })
    }

    fn json<T: DeserializeOwned>(&self, req: RequestBuilder) -> ApiResult<T> {
        self.send(req)?.json().map_err(transport)
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> ApiResult<T> {
        self.json(self.http.post(self.url(path)).json(body))
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> ApiResult<T> {
        self.json(self.http.get(self.url(path)))
    }

    pub fn health(&self) -> ApiResult<HealthReport> {
        self.get("/health")
    }

    pub fn submit(&self, req: &SubmitRequest) -> ApiResult<TaskRecord> {
        self.post("/tasks", req)
    }

    pub fn check(&self, req: &SubmitRequest) -> ApiResult<ViabilityVerdict> {
        self.post("/tasks/check", req)
    }

    pub fn task(&self, id: &str) -> ApiResult<TaskRecord> {
        self.get(&format!("/tasks/{id}"))
    }

    pub fn tasks(&self, state: Option<&str>, device: Option<&str>) -> ApiResult<Vec<TaskRecord>> {
        let mut q: Vec<(&str, &str)> = Vec::new();
        if let Some(s) = state {
            q.push(("state", s));
        }
        if let Some(d) = device {
            q.push(("device", d));
        }
        self.json(self.http.get(self.url("/tasks")).query(&q))
    }

    pub fn cancel(&self, id: &str) -> ApiResult<TaskRecord> {
        self.post(&format!("/tasks/{id}/cancel"), &serde_json::json!({}))
    }

    pub fn requeue(&self, id: &str) -> ApiResult<TaskRecord> {
        self.post(&format!("/admin/tasks/{id}/requeue"), &serde_json::json!({}))
    }

    pub fn force_fail(&self, id: &str, message: Option<String>) -> ApiResult<TaskRecord> {
        self.post(&format!("/admin/tasks/{id}/force-fail"), &ForceFailRequest { message })
    }

    pub fn stale(&self, window_s: Option<f64>) -> ApiResult<Vec<TaskRecord>> {
        let mut req = self.http.get(self.url("/admin/tasks/stale"));
        if let Some(w) = window_s {
            req = req.query(&[("window_s", w)]);
        }
        self.json(req)
    }

    /// Creates or replaces a device. Returns the new snapshot and whether it
    /// was created.
    pub fn put_device(&self, id: &str, document: &Value) -> ApiResult<(DeviceSnapshot, bool)> {
        let resp = self.send(self.http.put(self.url(&format!("/admin/devices/{id}"))).json(document))?;
        let created = resp.status() == StatusCode::CREATED;
        Ok((resp.json().map_err(transport)?, created))
    }

    pub fn device(&self, id: &str) -> ApiResult<DeviceSnapshot> {
        self.get(&format!("/devices/{id}"))
    }

    pub fn devices(&self) -> ApiResult<Vec<DeviceSnapshot>> {
        self.get("/devices")
    }

    pub fn delete_device(&self, id: &str) -> ApiResult<DeviceSnapshot> {
        self.json(self.http.delete(self.url(&format!("/admin/devices/{id}"))))
    }

    pub fn device_history(&self, id: &str) -> ApiResult<Vec<DeviceSnapshot>> {
        self.get(&format!("/admin/devices/{id}/history"))
    }

    pub fn cache_stats(&self) -> ApiResult<CacheStats> {
        self.get("/admin/cache")
    }

    /// Opens the event stream, replaying after `from` when given. Frames are
    /// delivered on a channel fed by a reader thread; the channel closes when
    /// the connection ends.
    pub fn events(&self, from: Option<u64>) -> ApiResult<Receiver<SseFrame>> {
        let mut req = self.stream_http.get(self.url("/events"));
        if let Some(k) = from {
            req = req.query(&[("from", k)]);
        }
        let resp = self.send(req)?;
        let (tx, rx) = mpsc::channel();
        thread::Builder::new()
            .name("sse-reader".into())
            .spawn(move || {
                let mut reader = BufReader::new(resp);
                let mut frame = SseFrame { id: None, event: "message".into(), data: String::new() };
                let mut line = String::new();
                loop {
                    line.clear();
                    match reader.read_line(&mut line) {
                        Ok(0) | Err(_) => return,
                        Ok(_) => {}
                    }
                    let l = line.trim_end_matches(['\r', '\n']);
                    if l.is_empty() {
                        if !frame.data.is_empty() {
                            let done = std::mem::replace(
                                &mut frame,
                                SseFrame { id: None, event: "message".into(), data: String::new() },
                            );
                            if tx.send(done).is_err() {
                                return;
                            }
                        }
                        continue;
                    }
                    if l.starts_with(':') {
                        continue;
                    }
                    let (field, value) = l.split_once(':').unwrap_or((l, ""));
                    let value = value.strip_prefix(' ').unwrap_or(value);
                    match field {
                        "id" => frame.id = value.parse().ok(),
                        "event" => frame.event = value.to_string(),
                        "data" => {
                            if !frame.data.is_empty() {
                                frame.data.push('\n');
                            }
                            frame.data.push_str(value);
                        }
                        _ => {}
                    }
                }
            })
            .map_err(transport)?;
        Ok(rx)
    }
}
