use std::io::{BufRead, BufReader};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use reqwest::blocking::{Client, Response};
use reqwest::StatusCode;
use serde_json::{json, Value};
use vqpu_core::clock::SystemClock;
use vqpu_core::fixtures::{amplified_identity, heavy_hex_20, AMPLIFIED_CZ_PAIRS};
use vqpu_core::task::{CacheStats, ClaimResponse, HeartbeatResponse, ViabilityVerdict};
use vqpu_core::{DeviceSnapshot, ErrorCode, ErrorEnvelope, LifecycleEvent, TaskRecord, TaskState};
use vqpu_server::{spawn, ServerConfig, ServerHandle};

struct Api {
    base: String,
    http: Client,
}

impl Api {
    fn new(server: &ServerHandle) -> Self {
        Self { base: server.url(), http: Client::builder().timeout(Duration::from_secs(30)).build().unwrap() }
    }

    fn call(&self, method: reqwest::Method, path: &str, key: &str, body: Option<Value>) -> Response {
        let mut req = self.http.request(method, format!("{}{path}", self.base)).bearer_auth(key);
        if let Some(b) = body {
            req = req.json(&b);
        }
        req.send().unwrap()
    }

    fn get(&self, path: &str, key: &str) -> Response {
        self.call(reqwest::Method::GET, path, key, None)
    }

    fn post(&self, path: &str, key: &str, body: Value) -> Response {
        self.call(reqwest::Method::POST, path, key, Some(body))
    }

    fn put(&self, path: &str, key: &str, body: Value) -> Response {
        self.call(reqwest::Method::PUT, path, key, Some(body))
    }
}

fn server(liveness_s: f64) -> ServerHandle {
    let config = ServerConfig {
        bind_addr: "127.0.0.1:0".parse().unwrap(),
        liveness_window_s: liveness_s,
        ..ServerConfig::default()
    };
    spawn(config, Arc::new(SystemClock)).unwrap()
}

fn with_device(api: &Api, id: &str, noisy: bool) -> DeviceSnapshot {
    let r = api.put(&format!("/admin/devices/{id}"), "dev-admin", serde_json::to_value(heavy_hex_20(noisy)).unwrap());
    assert!(r.status().is_success(), "{}", r.text().unwrap());
    r.json().unwrap()
}

fn submit_body(device: &str, source: &str) -> Value {
    json!({ "circuit_source": source, "shots": 64, "device_id": device, "seed": 5 })
}

fn envelope(r: Response) -> ErrorEnvelope {
    r.json().unwrap()
}

#[test]
fn submission_admission_and_viability() {
    let srv = server(90.0);
    let api = Api::new(&srv);
    with_device(&api, "hh", true);

    let r = api.post("/tasks", "dev-user", submit_body("hh", &amplified_identity(AMPLIFIED_CZ_PAIRS)));
    assert_eq!(r.status(), StatusCode::CREATED);
    let rec: TaskRecord = r.json().unwrap();
    assert_eq!(rec.state, TaskState::Queued);
    assert!(rec.owner.is_none() && rec.bound_snapshot.is_none());

    let r = api.post("/tasks", "dev-user", submit_body("hh", "qubits 4\ncz 0 3"));
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(envelope(r).code, ErrorCode::TopologyViolation);

    let r = api.post("/tasks", "dev-user", submit_body("hh", "qubits 2\ncx 0 1"));
    assert_eq!(envelope(r).code, ErrorCode::UnsupportedGate);
    let r = api.post("/tasks", "dev-user", submit_body("hh", "qubit 2"));
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
    assert_eq!(envelope(r).code, ErrorCode::ParseError);
    let r = api.post("/tasks", "dev-user", submit_body("nowhere", "qubits 1"));
    assert_eq!(r.status(), StatusCode::NOT_FOUND);
    assert_eq!(envelope(r).code, ErrorCode::UnknownDevice);

    let tasks: Vec<TaskRecord> = api.get("/tasks", "dev-user").json().unwrap();
    assert_eq!(tasks.len(), 1);

    let mut offline = heavy_hex_20(true);
    offline.qubits[3].state = vqpu_core::QubitState::Offline;
    api.put("/admin/devices/hh", "dev-admin", serde_json::to_value(offline).unwrap());
    let body = submit_body("hh", "qubits 4\nsx 3\nmeasure 3");
    let v1: ViabilityVerdict = api.post("/tasks/check", "dev-user", body.clone()).json().unwrap();
    let v2: ViabilityVerdict = api.post("/tasks/check", "dev-user", body).json().unwrap();
    assert!(!v1.admissible);
    assert_eq!(v1.code, Some(ErrorCode::QubitOffline));
    assert_eq!(v1.line, Some(2));
    assert_eq!(v1, v2);
    let ok: ViabilityVerdict = api.post("/tasks/check", "dev-user", submit_body("hh", "qubits 2\nsx 0")).json().unwrap();
    assert!(ok.admissible && ok.snapshot_version == 2);
    let tasks: Vec<TaskRecord> = api.get("/tasks", "dev-user").json().unwrap();
    assert_eq!(tasks.len(), 1, "viability checks create nothing");
}

#[test]
fn authentication_and_roles() {
    let srv = server(90.0);
    let api = Api::new(&srv);
    assert_eq!(api.get("/tasks", "wrong").status(), StatusCode::UNAUTHORIZED);
    let r = api.put("/admin/devices/x", "dev-user", serde_json::to_value(heavy_hex_20(false)).unwrap());
    assert_eq!(r.status(), StatusCode::FORBIDDEN);
    assert_eq!(envelope(r).code, ErrorCode::Forbidden);
    assert_eq!(api.post("/agent/claim", "dev-user", json!({"agent_id": "a"})).status(), StatusCode::FORBIDDEN);
    assert_eq!(api.post("/agent/claim", "dev-admin", json!({"agent_id": "a"})).status(), StatusCode::NO_CONTENT);
    let health: Value = reqwest::blocking::get(format!("{}/health", srv.url())).unwrap().json().unwrap();
    assert_eq!(health["status"], "ok");
}

#[test]
fn agent_protocol_round_trip() {
    let srv = server(90.0);
    let api = Api::new(&srv);
    with_device(&api, "hh", false);
    assert_eq!(api.post("/agent/claim", "dev-agent", json!({"agent_id": "a1"})).status(), StatusCode::NO_CONTENT);

    let rec: TaskRecord = api.post("/tasks", "dev-user", submit_body("hh", "qubits 2\nsx 0")).json().unwrap();
    let r = api.post("/agent/claim", "dev-agent", json!({"agent_id": "a1"}));
    assert_eq!(r.status(), StatusCode::OK);
    let claim: ClaimResponse = r.json().unwrap();
    assert_eq!(claim.task.task_id, rec.task_id);
    assert_eq!(claim.payload.seed, 5);
    assert_eq!(claim.payload.bound_snapshot.snapshot_version, 1);

    let id = &rec.task_id;
    let r = api.post(&format!("/agent/tasks/{id}/running"), "dev-agent", json!({"agent_id": "a2", "scheduler_job_id": "j"}));
    assert_eq!(r.status(), StatusCode::FORBIDDEN);
    assert_eq!(envelope(r).code, ErrorCode::NotOwner);
    let r = api.post(&format!("/agent/tasks/{id}/running"), "dev-agent", json!({"agent_id": "a1", "scheduler_job_id": "sim-42"}));
    assert_eq!(r.json::<TaskRecord>().unwrap().scheduler_job_id.as_deref(), Some("sim-42"));

    let hb: HeartbeatResponse =
        api.post("/agent/heartbeat", "dev-agent", json!({"agent_id": "a1", "task_ids": [id, "zzz"]})).json().unwrap();
    assert_eq!(hb.acks.len(), 2);

    let result = json!({
        "counts": {"00": 64}, "shots": 64, "seed": 5,
        "timings": {"parse_s": 0.0, "noise_build_s": 0.0, "transpile_s": 0.0, "simulate_s": 0.0},
    });
    let r = api.post(&format!("/agent/tasks/{id}/completed"), "dev-agent", json!({"agent_id": "a1", "result": result}));
    assert_eq!(r.status(), StatusCode::OK);
    let r = api.post(&format!("/agent/tasks/{id}/completed"), "dev-agent", json!({"agent_id": "a1", "result": result}));
    assert_eq!(r.status(), StatusCode::CONFLICT);
    assert_eq!(envelope(r).code, ErrorCode::IllegalTransition);
    let failed = json!({"agent_id": "a1", "error": ErrorEnvelope::new(ErrorCode::RunnerException, "late")});
    assert_eq!(api.post(&format!("/agent/tasks/{id}/failed"), "dev-agent", failed).status(), StatusCode::CONFLICT);
    let done: TaskRecord = api.get(&format!("/tasks/{id}"), "dev-user").json().unwrap();
    assert_eq!(done.state, TaskState::Completed);
    assert_eq!(done.result.unwrap().counts["00"], 64);
    assert!(done.bound_snapshot.is_some());
    assert_eq!(srv.state.store.audit().len(), 2);
    let r = api.post(&format!("/tasks/{id}/cancel"), "dev-user", json!({}));
    assert_eq!(r.status(), StatusCode::CONFLICT);
}

#[test]
fn admin_recovery_and_staleness() {
    let srv = server(1.0);
    let api = Api::new(&srv);
    with_device(&api, "hh", false);
    let rec: TaskRecord = api.post("/tasks", "dev-user", submit_body("hh", "qubits 1\nsx 0")).json().unwrap();
    let id = rec.task_id;
    let r = api.post(&format!("/admin/tasks/{id}/requeue"), "dev-admin", json!({}));
    assert_eq!(r.status(), StatusCode::CONFLICT);
    api.post("/agent/claim", "dev-agent", json!({"agent_id": "a1"}));
    let stale: Vec<TaskRecord> = api.get("/admin/tasks/stale", "dev-admin").json().unwrap();
    assert!(stale.is_empty());
    thread::sleep(Duration::from_millis(1300));
    let stale: Vec<TaskRecord> = api.get("/admin/tasks/stale", "dev-admin").json().unwrap();
    assert_eq!(stale.len(), 1);
    assert_eq!(stale[0].state, TaskState::Running);
    let q: TaskRecord = api.post(&format!("/admin/tasks/{id}/requeue"), "dev-admin", json!({})).json().unwrap();
    assert_eq!(q.state, TaskState::Queued);
    assert!(q.owner.is_none());
    let f: TaskRecord = api.post(&format!("/admin/tasks/{id}/force-fail"), "dev-admin", json!({"message": "operator"})).json().unwrap();
    assert_eq!(f.state, TaskState::Failed);
    assert_eq!(f.error.unwrap().code, ErrorCode::ForceFailed);

    let other: TaskRecord = api.post("/tasks", "dev-user", submit_body("hh", "qubits 1\nsx 0")).json().unwrap();
    let queued: Vec<TaskRecord> = api.get("/tasks?state=queued&device=hh", "dev-user").json().unwrap();
    assert_eq!(queued.len(), 1);
    let c: TaskRecord = api.post(&format!("/tasks/{}/cancel", other.task_id), "dev-user", json!({})).json().unwrap();
    assert_eq!(c.state, TaskState::Cancelled);
}

#[test]
fn device_versions_and_cache_counters() {
    let srv = server(90.0);
    let api = Api::new(&srv);
    let v1 = with_device(&api, "hh", true);
    let v2 = with_device(&api, "hh", true);
    assert_eq!((v1.snapshot_version, v2.snapshot_version), (1, 2));
    let base: CacheStats = api.get("/admin/cache", "dev-admin").json().unwrap();
    for _ in 0..10 {
        let s: DeviceSnapshot = api.get("/devices/hh", "dev-user").json().unwrap();
        assert_eq!(s.snapshot_version, 2);
    }
    let after: CacheStats = api.get("/admin/cache", "dev-admin").json().unwrap();
    assert_eq!(after.misses - base.misses, 1);
    assert_eq!(after.hits - base.hits, 9);
    let zeroed = heavy_hex_20(true).zero_noise();
    let v3: DeviceSnapshot = api.put("/admin/devices/hh", "dev-admin", serde_json::to_value(&zeroed).unwrap()).json().unwrap();
    let read: DeviceSnapshot = api.get("/devices/hh", "dev-user").json().unwrap();
    assert_eq!(read.snapshot_version, v3.snapshot_version);
    assert!(read.qubits.iter().all(|q| q.eps_1q.is_none() && q.readout_error.is_none()));

    let mut doc = serde_json::to_value(&read).unwrap();
    doc["device_id"] = json!("other");
    let r = api.put("/admin/devices/hh", "dev-admin", doc);
    assert_eq!(envelope(r).code, ErrorCode::DeviceMismatch);
    let r = api.put("/admin/devices/hh", "dev-admin", json!({"num_qubits": 2, "native_gates": ["cz"], "qubits": [], "edges": []}));
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(envelope(r).code, ErrorCode::SnapshotInvalid);

    let listed: Vec<DeviceSnapshot> = api.get("/devices", "dev-user").json().unwrap();
    assert_eq!(listed.len(), 1);
    assert_eq!(api.call(reqwest::Method::DELETE, "/admin/devices/hh", "dev-admin", None).status(), StatusCode::OK);
    assert_eq!(api.get("/devices/hh", "dev-user").status(), StatusCode::NOT_FOUND);
}

#[test]
fn deleted_device_fails_queued_task_at_claim() {
    let srv = server(90.0);
    let api = Api::new(&srv);
    with_device(&api, "gone", false);
    let rec: TaskRecord = api.post("/tasks", "dev-user", submit_body("gone", "qubits 1\nsx 0")).json().unwrap();
    api.call(reqwest::Method::DELETE, "/admin/devices/gone", "dev-admin", None);
    assert_eq!(api.post("/agent/claim", "dev-agent", json!({"agent_id": "a"})).status(), StatusCode::NO_CONTENT);
    let t: TaskRecord = api.get(&format!("/tasks/{}", rec.task_id), "dev-user").json().unwrap();
    assert_eq!(t.state, TaskState::Failed);
    assert_eq!(t.error.unwrap().code, ErrorCode::DeviceUnavailable);
}

#[test]
fn long_poll_claim_wakes_on_submission() {
    let srv = server(90.0);
    let api = Api::new(&srv);
    with_device(&api, "hh", false);
    let base = srv.url();
    let waiter = thread::spawn(move || {
        let started = Instant::now();
        let r = Client::new()
            .post(format!("{base}/agent/claim?wait_s=10"))
            .bearer_auth("dev-agent")
            .json(&json!({"agent_id": "a"}))
            .send()
            .unwrap();
        (r.status(), started.elapsed())
    });
    thread::sleep(Duration::from_millis(300));
    api.post("/tasks", "dev-user", submit_body("hh", "qubits 1\nsx 0"));
    let (status, waited) = waiter.join().unwrap();
    assert_eq!(status, StatusCode::OK);
    assert!(waited < Duration::from_secs(5), "{waited:?}");

    let started = Instant::now();
    let r = api.post("/agent/claim?wait_s=0.5", "dev-agent", json!({"agent_id": "a"}));
    assert_eq!(r.status(), StatusCode::NO_CONTENT);
    assert!(started.elapsed() >= Duration::from_millis(450));
}

/// Reads `n` data frames from an SSE response.
fn read_events(resp: Response, n: usize) -> Vec<(Option<String>, String)> {
    let mut reader = BufReader::new(resp);
    let mut out = Vec::new();
    let (mut event, mut data) = (None, String::new());
    let mut line = String::new();
    while out.len() < n {
        line.clear();
        if reader.read_line(&mut line).unwrap() == 0 {
            break;
        }
        let l = line.trim_end_matches(['\r', '\n']);
        if l.is_empty() {
            if !data.is_empty() {
                out.push((event.take(), std::mem::take(&mut data)));
            }
            event = None;
        } else if let Some(v) = l.strip_prefix("event:") {
            event = Some(v.trim().to_string());
        } else if let Some(v) = l.strip_prefix("data:") {
            data.push_str(v.trim_start());
        }
    }
    out
}

#[test]
fn event_stream_live_and_replay() {
    let srv = server(90.0);
    let api = Api::new(&srv);
    with_device(&api, "hh", false);
    let stream = Client::new()
        .get(format!("{}/events", srv.url()))
        .bearer_auth("dev-user")
        .send()
        .unwrap();
    assert_eq!(stream.headers()["content-type"], "text/event-stream");
    let rec: TaskRecord = api.post("/tasks", "dev-user", submit_body("hh", "qubits 1\nsx 0")).json().unwrap();
    let got = read_events(stream, 1);
    let ev: LifecycleEvent = serde_json::from_str(&got[0].1).unwrap();
    assert_eq!(got[0].0.as_deref(), Some("TASK_QUEUED"));
    assert_eq!(ev.task_id.as_deref(), Some(rec.task_id.as_str()));

    for _ in 0..5 {
        api.post("/tasks", "dev-user", submit_body("hh", "qubits 1\nsx 0"));
    }
    let last = srv.state.events.last_sequence();
    let k = ev.sequence;
    let replay = Client::new()
        .get(format!("{}/events", srv.url()))
        .bearer_auth("dev-user")
        .header("Last-Event-ID", k.to_string())
        .send()
        .unwrap();
    let frames = read_events(replay, (last - k) as usize);
    let seqs: Vec<u64> = frames.iter().map(|f| serde_json::from_str::<LifecycleEvent>(&f.1).unwrap().sequence).collect();
    assert_eq!(seqs, ((k + 1)..=last).collect::<Vec<_>>());

    let from_query = Client::new()
        .get(format!("{}/events?from=0", srv.url()))
        .bearer_auth("dev-user")
        .send()
        .unwrap();
    let frames = read_events(from_query, last as usize);
    assert_eq!(frames.len(), last as usize);
    assert_eq!(frames[0].0.as_deref(), Some("DEVICE_UPDATED"));
}
