//! HTTP routes. Handlers are thin: authenticate, decode, call the store or
//! registry, encode.

use std::collections::HashMap;
use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration as StdDuration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use vqpu_core::device::DeviceDescriptor;
use vqpu_core::task::{
    ClaimRequest, ClaimResponse, ForceFailRequest, HealthReport, HeartbeatRequest, HeartbeatResponse,
    ReportCompletedRequest, ReportFailedRequest, ReportRunningRequest, SubmitRequest, ViabilityVerdict,
};
use vqpu_core::{check_admissibility, parse, DeviceSnapshot, ErrorCode, ErrorEnvelope, LifecycleEvent, TaskState};

use crate::auth::{Principal, Role};
use crate::events::{EventHub, Subscription};
use crate::store::{NewTask, Outcome, TaskFilter};
use crate::AppState;

/// Longest server-side wait a claim long-poll may request.
pub const MAX_CLAIM_WAIT_S: f64 = 25.0;
const KEEP_ALIVE: StdDuration = StdDuration::from_secs(15);

pub fn status_for(code: ErrorCode) -> StatusCode {
    use ErrorCode::*;
    match code {
        AuthFailed => StatusCode::UNAUTHORIZED,
        Forbidden | NotOwner => StatusCode::FORBIDDEN,
        UnknownTask | UnknownDevice | UnknownJob => StatusCode::NOT_FOUND,
        IllegalTransition | DeviceUnavailable => StatusCode::CONFLICT,
        UnsupportedGate | QubitOffline | QubitOutOfRange | TopologyViolation | SnapshotInvalid => {
            StatusCode::UNPROCESSABLE_ENTITY
        }
        ParseError | UnsupportedDialect | InvalidRequest | DeviceMismatch | PayloadMalformed
        | ReplayWindowExceeded => StatusCode::BAD_REQUEST,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

pub struct ApiError(pub ErrorEnvelope);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (status_for(self.0.code), Json(self.0)).into_response()
    }
}

impl From<ErrorEnvelope> for ApiError {
    fn from(e: ErrorEnvelope) -> Self {
        ApiError(e)
    }
}

impl From<crate::store::LifecycleError> for ApiError {
    fn from(e: crate::store::LifecycleError) -> Self {
        ApiError(e.to_envelope())
    }
}

impl From<crate::registry::RegistryError> for ApiError {
    fn from(e: crate::registry::RegistryError) -> Self {
        ApiError(e.to_envelope())
    }
}

type ApiResult<T> = Result<T, ApiError>;
type Shared = State<Arc<AppState>>;

fn authorize(state: &AppState, headers: &HeaderMap, role: Role) -> ApiResult<Principal> {
    let header = headers.get(axum::http::header::AUTHORIZATION).and_then(|v| v.to_str().ok());
    let principal = state
        .keys
        .authenticate(header)
        .ok_or_else(|| ApiError(ErrorEnvelope::new(ErrorCode::AuthFailed, "missing or unknown API key")))?;
    if !principal.has(role) {
        return Err(ApiError(ErrorEnvelope::new(
            ErrorCode::Forbidden,
            format!("'{}' lacks the {role:?} role", principal.name),
        )));
    }
    Ok(principal)
}

fn decode<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError(ErrorEnvelope::new(ErrorCode::InvalidRequest, format!("invalid request body: {e}"))))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/tasks", post(submit).get(list_tasks))
        .route("/tasks/check", post(check))
        .route("/tasks/{id}", get(get_task))
        .route("/tasks/{id}/cancel", post(cancel))
        .route("/admin/tasks/stale", get(stale))
        .route("/admin/tasks/{id}/requeue", post(requeue))
        .route("/admin/tasks/{id}/force-fail", post(force_fail))
        .route("/devices", get(list_devices))
        .route("/devices/{id}", get(get_device))
        .route("/admin/devices/{id}", put(put_device).delete(delete_device).get(get_device_authoritative))
        .route("/admin/devices/{id}/history", get(device_history))
        .route("/admin/cache", get(cache_stats))
        .route("/agent/claim", post(claim))
        .route("/agent/tasks/{id}/running", post(report_running))
        .route("/agent/tasks/{id}/completed", post(report_completed))
        .route("/agent/tasks/{id}/failed", post(report_failed))
        .route("/agent/heartbeat", post(heartbeat))
        .route("/agent/owned", get(owned))
        .route("/events", get(events))
        .with_state(state)
}

async fn health(State(s): Shared) -> Json<HealthReport> {
    Json(HealthReport {
        status: "ok".into(),
        cache_ttl_s: s.config.cache_ttl_s,
        liveness_window_s: s.config.liveness_window_s,
        last_sequence: s.events.last_sequence(),
    })
}

/// First-stage validation against the cached device view. Unknown devices
/// are an error; parse and admissibility failures become a verdict.
fn viability(s: &AppState, req: &SubmitRequest) -> ApiResult<(ViabilityVerdict, Option<ErrorEnvelope>)> {
    if req.shots == 0 {
        return Err(ApiError(ErrorEnvelope::new(ErrorCode::InvalidRequest, "shots must be positive")));
    }
    let snapshot = s.registry.cached(&req.device_id).ok_or_else(|| {
        ApiError(
            ErrorEnvelope::new(ErrorCode::UnknownDevice, format!("unknown device '{}'", req.device_id))
                .with_detail(serde_json::json!({ "device_id": req.device_id })),
        )
    })?;
    let mut verdict = ViabilityVerdict {
        admissible: true,
        device_id: snapshot.device_id.clone(),
        snapshot_version: snapshot.snapshot_version,
        code: None,
        line: None,
        message: None,
    };
    let rejection = match parse(&req.circuit_source, &req.dialect) {
        Err(e) => {
            verdict.line = match &e {
                vqpu_core::circuit::ParseError::Syntax { line, .. } => Some(*line),
                _ => None,
            };
            verdict.message = Some(e.to_string());
            Some(e.to_envelope())
        }
        Ok(circuit) => match check_admissibility(&circuit, &snapshot) {
            Ok(()) => None,
            Err(r) => {
                verdict.line = Some(r.line);
                verdict.message = Some(r.message.clone());
                Some(r.to_envelope())
            }
        },
    };
    if let Some(env) = &rejection {
        verdict.admissible = false;
        verdict.code = Some(env.code);
    }
    Ok((verdict, rejection))
}

async fn submit(State(s): Shared, headers: HeaderMap, body: Bytes) -> ApiResult<(StatusCode, Json<vqpu_core::TaskRecord>)> {
    let principal = authorize(&s, &headers, Role::User)?;
    let req: SubmitRequest = decode(&body)?;
    let (_, rejection) = viability(&s, &req)?;
    if let Some(env) = rejection {
        return Err(ApiError(env));
    }
    let seed = req.seed.unwrap_or_else(rand::random);
    let rec = s.store.enqueue(NewTask {
        circuit_source: req.circuit_source,
        dialect: req.dialect,
        shots: req.shots,
        device_id: req.device_id,
        seed,
        submitted_by: principal.name,
    })?;
    Ok((StatusCode::CREATED, Json(rec)))
}

async fn check(State(s): Shared, headers: HeaderMap, body: Bytes) -> ApiResult<Json<ViabilityVerdict>> {
    authorize(&s, &headers, Role::User)?;
    let req: SubmitRequest = decode(&body)?;
    Ok(Json(viability(&s, &req)?.0))
}

#[derive(Debug, Deserialize)]
struct TaskQuery {
    state: Option<String>,
    device: Option<String>,
    owner: Option<String>,
}

async fn list_tasks(
    State(s): Shared,
    headers: HeaderMap,
    Query(q): Query<TaskQuery>,
) -> ApiResult<Json<Vec<vqpu_core::TaskRecord>>> {
    authorize(&s, &headers, Role::User)?;
    let state = match q.state.as_deref() {
        None | Some("") => None,
        Some(raw) => Some(TaskState::parse(raw).ok_or_else(|| {
            ApiError(ErrorEnvelope::new(ErrorCode::InvalidRequest, format!("unknown state '{raw}'")))
        })?),
    };
    Ok(Json(s.store.list(&TaskFilter { state, device_id: q.device, owner: q.owner })))
}

async fn get_task(State(s): Shared, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<Json<vqpu_core::TaskRecord>> {
    authorize(&s, &headers, Role::User)?;
    Ok(Json(s.store.get(&id)?))
}

async fn cancel(State(s): Shared, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<Json<vqpu_core::TaskRecord>> {
    let p = authorize(&s, &headers, Role::User)?;
    Ok(Json(s.store.cancel(&id, &p.name, p.is_admin())?))
}

#[derive(Debug, Deserialize)]
struct StaleQuery {
    window_s: Option<f64>,
}

async fn stale(
    State(s): Shared,
    headers: HeaderMap,
    Query(q): Query<StaleQuery>,
) -> ApiResult<Json<Vec<vqpu_core::TaskRecord>>> {
    authorize(&s, &headers, Role::Admin)?;
    let window = match q.window_s {
        Some(w) if w.is_finite() && w >= 0.0 => chrono::Duration::milliseconds((w * 1000.0) as i64),
        _ => s.config.liveness_window(),
    };
    Ok(Json(s.store.stale(window)))
}

async fn requeue(State(s): Shared, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<Json<vqpu_core::TaskRecord>> {
    let p = authorize(&s, &headers, Role::Admin)?;
    Ok(Json(s.store.requeue(&id, &p.name)?))
}

async fn force_fail(
    State(s): Shared,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<vqpu_core::TaskRecord>> {
    let p = authorize(&s, &headers, Role::Admin)?;
    let req: ForceFailRequest = if body.is_empty() { ForceFailRequest::default() } else { decode(&body)? };
    Ok(Json(s.store.force_fail(&id, &p.name, req.message)?))
}

async fn list_devices(State(s): Shared, headers: HeaderMap) -> ApiResult<Json<Vec<DeviceSnapshot>>> {
    authorize(&s, &headers, Role::User)?;
    Ok(Json(s.registry.list_cached()))
}

fn unknown_device(id: &str) -> ApiError {
    ApiError(
        ErrorEnvelope::new(ErrorCode::UnknownDevice, format!("unknown device '{id}'"))
            .with_detail(serde_json::json!({ "device_id": id })),
    )
}

async fn get_device(State(s): Shared, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<Json<DeviceSnapshot>> {
    authorize(&s, &headers, Role::User)?;
    s.registry.cached(&id).map(Json).ok_or_else(|| unknown_device(&id))
}

async fn get_device_authoritative(
    State(s): Shared,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> ApiResult<Json<DeviceSnapshot>> {
    authorize(&s, &headers, Role::Admin)?;
    s.registry.authoritative(&id).map(Json).ok_or_else(|| unknown_device(&id))
}

async fn device_history(State(s): Shared, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<Json<Vec<DeviceSnapshot>>> {
    authorize(&s, &headers, Role::Admin)?;
    Ok(Json(s.registry.history(&id)))
}

/// Accepts a bare descriptor or a full snapshot document. A snapshot whose
/// `device_id` disagrees with the path is refused.
async fn put_device(
    State(s): Shared,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<DeviceSnapshot>)> {
    authorize(&s, &headers, Role::Admin)?;
    let value: serde_json::Value = decode(&body)?;
    if let Some(other) = value.get("device_id").and_then(|v| v.as_str()) {
        if other != id {
            return Err(ApiError(ErrorEnvelope::new(
                ErrorCode::DeviceMismatch,
                format!("document is for '{other}', path names '{id}'"),
            )));
        }
    }
    let descriptor: DeviceDescriptor = serde_json::from_value(value).map_err(|e| {
        ApiError(ErrorEnvelope::new(ErrorCode::SnapshotInvalid, format!("malformed device document: {e}")))
    })?;
    let existed = s.registry.authoritative(&id).is_some();
    let snap = s.registry.put(&id, descriptor)?;
    let status = if existed { StatusCode::OK } else { StatusCode::CREATED };
    Ok((status, Json(snap)))
}

async fn delete_device(State(s): Shared, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<Json<DeviceSnapshot>> {
    authorize(&s, &headers, Role::Admin)?;
    Ok(Json(s.registry.delete(&id)?))
}

async fn cache_stats(State(s): Shared, headers: HeaderMap) -> ApiResult<Json<vqpu_core::task::CacheStats>> {
    authorize(&s, &headers, Role::Admin)?;
    Ok(Json(s.registry.stats()))
}

#[derive(Debug, Deserialize)]
struct ClaimQuery {
    wait_s: Option<f64>,
}

async fn claim(
    State(s): Shared,
    headers: HeaderMap,
    Query(q): Query<ClaimQuery>,
    body: Bytes,
) -> ApiResult<Response> {
    authorize(&s, &headers, Role::Agent)?;
    let req: ClaimRequest = decode(&body)?;
    let wait = q.wait_s.filter(|w| w.is_finite() && *w > 0.0).unwrap_or(0.0).min(MAX_CLAIM_WAIT_S);
    let deadline = tokio::time::Instant::now() + StdDuration::from_secs_f64(wait);
    loop {
        let notified = s.store.work_available().notified();
        tokio::pin!(notified);
        notified.as_mut().enable();
        let registry = s.registry.clone();
        let provider = move |device: &str| registry.authoritative(device);
        if let Some((task, _)) = s.store.claim(&req.agent_id, &provider)? {
            let payload = task.execution_payload().expect("claimed task carries a bound snapshot");
            return Ok(Json(ClaimResponse { task, payload }).into_response());
        }
        let now = tokio::time::Instant::now();
        if now >= deadline {
            return Ok(StatusCode::NO_CONTENT.into_response());
        }
        let _ = tokio::time::timeout(deadline - now, notified).await;
    }
}

async fn report_running(
    State(s): Shared,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<vqpu_core::TaskRecord>> {
    authorize(&s, &headers, Role::Agent)?;
    let req: ReportRunningRequest = decode(&body)?;
    Ok(Json(s.store.report_running(&id, &req.agent_id, &req.scheduler_job_id)?))
}

async fn report_completed(
    State(s): Shared,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<vqpu_core::TaskRecord>> {
    authorize(&s, &headers, Role::Agent)?;
    let req: ReportCompletedRequest = decode(&body)?;
    Ok(Json(s.store.report_terminal(&id, &req.agent_id, Outcome::Completed(req.result), req.accounting)?))
}

async fn report_failed(
    State(s): Shared,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<vqpu_core::TaskRecord>> {
    authorize(&s, &headers, Role::Agent)?;
    let req: ReportFailedRequest = decode(&body)?;
    Ok(Json(s.store.report_terminal(&id, &req.agent_id, Outcome::Failed(req.error), req.accounting)?))
}

async fn heartbeat(State(s): Shared, headers: HeaderMap, body: Bytes) -> ApiResult<Json<HeartbeatResponse>> {
    authorize(&s, &headers, Role::Agent)?;
    let req: HeartbeatRequest = decode(&body)?;
    Ok(Json(HeartbeatResponse { acks: s.store.heartbeat(&req.agent_id, &req.task_ids)? }))
}

#[derive(Debug, Deserialize)]
struct OwnedQuery {
    agent_id: String,
}

/// RUNNING tasks held by one agent, for restart recovery.
async fn owned(
    State(s): Shared,
    headers: HeaderMap,
    Query(q): Query<OwnedQuery>,
) -> ApiResult<Json<Vec<vqpu_core::TaskRecord>>> {
    authorize(&s, &headers, Role::Agent)?;
    let filter = TaskFilter { state: Some(TaskState::Running), device_id: None, owner: Some(q.agent_id) };
    Ok(Json(s.store.list(&filter)))
}

fn sse_frame(e: &LifecycleEvent) -> Event {
    Event::default()
        .id(e.sequence.to_string())
        .event(e.event_type.as_str())
        .data(serde_json::to_string(e).expect("event serializes"))
}

/// Unregisters the subscriber when the HTTP stream is dropped.
struct SubscriberGuard {
    hub: Arc<EventHub>,
    id: u64,
}

impl Drop for SubscriberGuard {
    fn drop(&mut self) {
        self.hub.unsubscribe(self.id);
    }
}

pub fn event_stream(hub: Arc<EventHub>, sub: Subscription) -> impl Stream<Item = Result<Event, Infallible>> {
    let Subscription { id, replay, window_exceeded, live } = sub;
    let warning = window_exceeded.map(|(requested, oldest)| {
        let env = ErrorEnvelope::new(
            ErrorCode::ReplayWindowExceeded,
            format!("sequence {requested} is older than the retained window; replaying from {oldest}"),
        )
        .with_detail(serde_json::json!({ "requested": requested, "oldest_retained": oldest }));
        Event::default().event("error").data(serde_json::to_string(&env).expect("envelope serializes"))
    });
    let guard = SubscriberGuard { hub, id };
    let live = stream::unfold((live, guard), |(mut rx, guard)| async move {
        rx.recv().await.map(|e| (sse_frame(&e), (rx, guard)))
    });
    stream::iter(warning)
        .chain(stream::iter(replay.into_iter().map(|e| sse_frame(&e))))
        .chain(live)
        .map(Ok)
}

async fn events(
    State(s): Shared,
    headers: HeaderMap,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    authorize(&s, &headers, Role::User)?;
    let from_header = headers.get("last-event-id").and_then(|v| v.to_str().ok()).map(str::to_string);
    let from = match q.get("from").cloned().or(from_header) {
        None => None,
        Some(raw) => Some(raw.trim().parse::<u64>().map_err(|_| {
            ApiError(ErrorEnvelope::new(ErrorCode::InvalidRequest, format!("invalid replay sequence '{raw}'")))
        })?),
    };
    let sub = s.events.subscribe(from);
    Ok(Sse::new(event_stream(s.events.clone(), sub)).keep_alive(KeepAlive::new().interval(KEEP_ALIVE)))
}
