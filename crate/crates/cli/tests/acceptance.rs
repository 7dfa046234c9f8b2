//! Acceptance suite. Every criterion prints one PASS/FAIL line to stderr,
//! bypassing libtest's output capture, and fails its test on FAIL.
//!
//! Criteria run one at a time: several of them measure timing.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::thread;
use std::time::{Duration, Instant};

use chrono::DateTime;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqpu::api::Api;
use vqpu::experiments::concurrency::{ConcurrencyParams, ConcurrencyReport};
use vqpu::experiments::{binding, concurrency, fidelity, latency, recovery, Lab, Report};
use vqpu::harness::{Binaries, ServerProcess, ServerSettings};
use vqpu_core::clock::ManualClock;
use vqpu_core::fixtures::heavy_hex_20;
use vqpu_core::payload::{PAYLOAD_FILE, RESULT_FILE};
use vqpu_core::sim::density_oracle;
use vqpu_core::task::LEGAL_EDGES;
use vqpu_core::{
    build_noise_model, parse, DeviceDescriptor, EdgeCalibration, EventType, QubitCalibration, SimulationRequest,
    Simulator, TaskState, DIALECT_NQASM1,
};
use vqpu_server::conformance::run_random_sequences;
use vqpu_server::{DeviceRegistry, EventHub};

static SERIAL: Mutex<()> = Mutex::new(());

fn report_line(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

/// Runs one criterion, prints its verdict line and fails the test on FAIL.
fn criterion(number: u32, title: &str, body: impl FnOnce() -> Result<String, String>) {
    let _serial = SERIAL.lock().unwrap_or_else(|p| p.into_inner());
    let started = Instant::now();
    let outcome = match catch_unwind(AssertUnwindSafe(body)) {
        Ok(r) => r,
        Err(panic) => Err(panic
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    };
    let secs = started.elapsed().as_secs_f64();
    match &outcome {
        Ok(detail) => report_line(&format!("ACCEPTANCE {number:>2} PASS  {title}: {detail} [{secs:.1}s]")),
        Err(why) => report_line(&format!("ACCEPTANCE {number:>2} FAIL  {title}: {why} [{secs:.1}s]")),
    }
    if let Err(why) = outcome {
        panic!("criterion {number} failed: {why}");
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit_s: f64, started: Instant) -> Result<(), String> {
    let took = started.elapsed().as_secs_f64();
    check(took < limit_s, || format!("took {took:.1}s, limit {limit_s}s"))
}

fn binaries() -> Binaries {
    static BINARIES: OnceLock<Binaries> = OnceLock::new();
    BINARIES
        .get_or_init(|| {
            let agent = PathBuf::from(env!("CARGO_BIN_EXE_vqpu-agent"));
            let dir = agent.parent().unwrap().to_path_buf();
            let runner = dir.join(format!("vqpu-runner{}", std::env::consts::EXE_SUFFIX));
            if !runner.is_file() {
                let status = Command::new(env!("CARGO"))
                    .args(["build", "-p", "vqpu-runner", "--bin", "vqpu-runner"])
                    .status()
                    .expect("cargo runs");
                assert!(status.success(), "building vqpu-runner failed");
            }
            Binaries { server: PathBuf::from(env!("CARGO_BIN_EXE_vqpu-server")), agent, runner }
                .checked()
                .expect("all executables present")
        })
        .clone()
}

struct Env {
    _server: ServerProcess,
    lab: Lab,
    _root: tempfile::TempDir,
}

fn start_env(tag: &str, liveness_window_s: f64, root: tempfile::TempDir) -> Env {
    let server = ServerProcess::start(
        &binaries().server,
        &ServerSettings { data_dir: root.path().join("server"), liveness_window_s, cache_ttl_s: 5.0 },
    )
    .expect("server starts");
    let user = Api::new(&server.url(), "dev-user");
    let lab = Lab {
        admin: user.with_key("dev-admin"),
        user,
        agent_key: "dev-agent".into(),
        binaries: binaries(),
        work_root: root.path().join("agents"),
        server_pid: Some(server.pid()),
        tag: tag.into(),
    };
    Env { _server: server, lab, _root: root }
}

fn env(tag: &str, liveness_window_s: f64) -> Env {
    start_env(tag, liveness_window_s, tempfile::tempdir().unwrap())
}

fn report_or_err<R: Report>(r: Result<R, vqpu::experiments::ExpError>) -> Result<R, String> {
    r.map_err(|e| format!("scenario aborted: {e}"))
}

#[test]
fn criterion_01_claim_time_binding() {
    criterion(1, "claim-time binding", || {
        let started = Instant::now();
        let env = env("c1", 90.0);
        let report = report_or_err(binding::run(&env.lab, &binding::BindingParams::default()))?;
        drop(env);
        check(report.passed(), || format!("{}; tasks {:?}", report.summary(), report.tasks))?;
        check(report.tasks.len() == 8, || "expected 8 tasks".into())?;
        within(60.0, started)?;
        Ok(report.summary())
    });
}

#[test]
fn criterion_02_cross_device_identity() {
    criterion(2, "cross-device identity", || {
        let started = Instant::now();
        let env = env("c2", 90.0);
        let report = report_or_err(fidelity::run(&env.lab, &fidelity::FidelityParams::default()))?;
        drop(env);
        check(report.passed(), || format!("{}; tasks {:?}", report.summary(), report.tasks))?;
        within(180.0, started)?;
        Ok(report.summary())
    });
}

/// The exactly-once batch, run once and shared with the replay criterion,
/// which needs its preserved run directories.
struct Batch {
    report: Result<ConcurrencyReport, String>,
    seconds: f64,
    _root: tempfile::TempDir,
}

fn batch() -> &'static Batch {
    static BATCH: OnceLock<Batch> = OnceLock::new();
    BATCH.get_or_init(|| {
        let started = Instant::now();
        let root = tempfile::tempdir().unwrap();
        let kept = tempfile::tempdir().unwrap();
        let env = start_env("c3", 90.0, root);
        let lab = Lab { work_root: kept.path().to_path_buf(), ..env.lab.clone() };
        let report = report_or_err(concurrency::run(&lab, &ConcurrencyParams::default()));
        drop(env);
        Batch { report, seconds: started.elapsed().as_secs_f64(), _root: kept }
    })
}

#[test]
fn criterion_03_exactly_once_concurrency() {
    criterion(3, "exactly-once concurrency", || {
        let b = batch();
        let report = b.report.as_ref().map_err(Clone::clone)?;
        let audits: Vec<String> = report
            .agent_audits
            .iter()
            .map(|(k, a)| format!("{k}: {} samples, {} violations", a.samples, a.violations.len()))
            .collect();
        check(report.passed(), || {
            let bad: Vec<_> = report.tasks.iter().filter(|t| t.claims != 1 || t.terminal_events != 1).collect();
            format!("{}; audits {audits:?}; server audit {:?}; suspicious {bad:?}", report.summary(), report.server_audit)
        })?;
        check(report.split.len() == 2 && report.split.values().all(|n| *n >= 1), || {
            format!("split {:?}", report.split)
        })?;
        check(b.seconds < 300.0, || format!("took {:.1}s", b.seconds))?;
        Ok(format!("{}; socket audits clean ({})", report.summary(), audits.join("; ")))
    });
}

#[test]
fn criterion_04_crash_recovery() {
    criterion(4, "crash recovery", || {
        let started = Instant::now();
        let env = env("c4", 5.0);
        let params = recovery::RecoveryParams { tasks: 3, liveness_window_s: 5.0, timeout_s: 110.0 };
        let report = report_or_err(recovery::run(&env.lab, &params))?;
        drop(env);
        check(report.passed(), || format!("{}; {:?}", report.summary(), report.tasks))?;
        check(report.observed_s >= 10.0, || format!("observed only {:.1}s", report.observed_s))?;
        within(120.0, started)?;
        Ok(report.summary())
    });
}

#[test]
fn criterion_05_bounded_service_overhead() {
    criterion(5, "bounded service overhead", || {
        let started = Instant::now();
        let env = env("c5", 90.0);
        let report = report_or_err(latency::run(&env.lab, &latency::LatencyParams::default()))?;
        drop(env);
        let medians: Vec<String> = report
            .medians
            .iter()
            .map(|m| format!("n={} admit={:.2}ms poll={:.2}ms", m.qubits, m.t_admit * 1e3, m.t_poll * 1e3))
            .collect();
        check(report.passed(), || format!("{}; medians {medians:?}; scaling {:?}", report.summary(), report.scaling))?;
        within(300.0, started)?;
        Ok(report.summary())
    });
}

fn random_descriptor(rng: &mut ChaCha8Rng, n: usize) -> DeviceDescriptor {
    let qubits = (0..n)
        .map(|q| QubitCalibration {
            eps_1q: rng.random_bool(0.8).then(|| rng.random_range(0.005..0.15)),
            readout_error: rng.random_bool(0.8).then(|| rng.random_range(0.005..0.25)),
            ..QubitCalibration::ideal(q)
        })
        .collect();
    let mut edges = Vec::new();
    for a in 0..n {
        for b in 0..n {
            if a != b {
                edges.push(EdgeCalibration {
                    src: a,
                    dst: b,
                    gate: "cz".into(),
                    eps: rng.random_bool(0.8).then(|| rng.random_range(0.005..0.15)),
                });
            }
        }
    }
    DeviceDescriptor {
        num_qubits: n,
        native_gates: ["cz", "rz", "sx", "x"].iter().map(|s| s.to_string()).collect(),
        qubits,
        edges,
    }
}

fn random_small_circuit(rng: &mut ChaCha8Rng, n: usize) -> String {
    let mut src = format!("qubits {n}\n");
    for _ in 0..rng.random_range(2..14) {
        let a = rng.random_range(0..n);
        match rng.random_range(0..6) {
            0 | 1 => src.push_str(&format!("sx {a}\n")),
            2 => src.push_str(&format!("rz {a} {:?}\n", rng.random_range(-3.1..3.1))),
            3 => src.push_str(&format!("x {a}\n")),
            _ if n > 1 => src.push_str(&format!("cz {a} {}\n", (a + rng.random_range(1..n)) % n)),
            _ => src.push_str(&format!("sx {a}\n")),
        }
    }
    src
}

fn simulate(src: &str, descriptor: DeviceDescriptor, shots: u64, seed: u64) -> (BTreeMap<String, u64>, BTreeMap<String, f64>) {
    let snapshot = descriptor.into_snapshot("calibrated", 1, DateTime::UNIX_EPOCH).unwrap();
    let noise = build_noise_model(&snapshot);
    let circuit = parse(src, DIALECT_NQASM1).unwrap();
    let exact = density_oracle(&circuit, &noise).unwrap();
    let counts = Simulator::default().run(&SimulationRequest { circuit, noise, shots, seed }).unwrap().counts;
    (counts, exact)
}

fn within_sigmas(counts: &BTreeMap<String, u64>, exact: &BTreeMap<String, f64>, shots: u64, k: f64) -> Result<(), String> {
    for (outcome, &p) in exact {
        let observed = counts.get(outcome).copied().unwrap_or(0) as f64;
        let expected = p * shots as f64;
        let sigma = (shots as f64 * p * (1.0 - p)).sqrt().max(1.0);
        check((observed - expected).abs() <= k * sigma, || {
            format!("outcome {outcome}: observed {observed}, expected {expected:.1}, sigma {sigma:.1}")
        })?;
    }
    check(counts.keys().all(|k| exact.contains_key(k)), || "outcome outside oracle support".into())
}

#[test]
fn criterion_06_noise_model_correctness() {
    criterion(6, "noise-model correctness", || {
        let started = Instant::now();
        let shots = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(606);
        for case in 0..50 {
            let n = rng.random_range(1..=3);
            let descriptor = random_descriptor(&mut rng, n);
            let src = random_small_circuit(&mut rng, n);
            let (counts, exact) = simulate(&src, descriptor, shots, 10_000 + case);
            within_sigmas(&counts, &exact, shots, 5.0).map_err(|e| format!("circuit {case}: {e}\n{src}"))?;
        }

        let (r1, r2) = (0.07, 0.18);
        let mut readout = random_descriptor(&mut rng, 2);
        for (q, r) in readout.qubits.iter_mut().zip([r1, r2]) {
            q.eps_1q = None;
            q.readout_error = Some(r);
        }
        let (counts, _) = simulate("qubits 2\nmeasure 0\nmeasure 1\n", readout, shots, 61);
        let analytic = (1.0 - r1) * (1.0 - r2);
        let p00 = counts.get("00").copied().unwrap_or(0) as f64 / shots as f64;
        let sigma = (analytic * (1.0 - analytic) / shots as f64).sqrt();
        check((p00 - analytic).abs() <= 5.0 * sigma, || format!("readout identity p00 {p00} vs {analytic}"))?;

        let mut clamp = random_descriptor(&mut rng, 1);
        clamp.qubits[0].eps_1q = None;
        clamp.qubits[0].readout_error = Some(0.6);
        let (counts, exact) = simulate("qubits 1\nmeasure 0\n", clamp, shots, 62);
        let flip = counts.get("1").copied().unwrap_or(0) as f64 / shots as f64;
        let sigma = (0.25 / shots as f64).sqrt();
        check((exact["1"] - 0.5).abs() < 1e-12, || format!("oracle flip rate {}", exact["1"]))?;
        check((flip - 0.5).abs() <= 5.0 * sigma, || format!("clamped flip rate {flip}"))?;
        within(180.0, started)?;
        Ok(format!(
            "50/50 circuits within 5σ at 1e5 shots; readout p00 {p00:.4} vs {analytic:.4}; r=0.6 flips at {flip:.4}"
        ))
    });
}

#[test]
fn criterion_07_lifecycle_property_suite() {
    criterion(7, "lifecycle property suite", || {
        let started = Instant::now();
        let r = run_random_sequences(100_000, 12, 77);
        check(r.sequences == 100_000, || format!("ran {} sequences", r.sequences))?;
        check(r.passed(), || format!("{r:?}"))?;
        check(r.edges_seen.iter().all(|e| LEGAL_EDGES.contains(e)), || format!("edges {:?}", r.edges_seen))?;
        check(r.post_terminal_attempts > 0 && r.duplicate_terminal_reports > 0, || {
            "terminal absorption was never exercised".into()
        })?;
        within(60.0, started)?;
        Ok(format!(
            "{} sequences, {} operations, {}/{} legal edges seen, 0 illegal; {} post-terminal attempts all rejected; \
             {} duplicate terminal reports without effect; replay exact",
            r.sequences,
            r.operations,
            r.edges_seen.len(),
            LEGAL_EDGES.len(),
            r.post_terminal_attempts,
            r.duplicate_terminal_reports
        ))
    });
}

#[test]
fn criterion_08_cache_semantics() {
    criterion(8, "cache semantics", || {
        let started = Instant::now();
        let clock = Arc::new(ManualClock::new(DateTime::UNIX_EPOCH));
        let hub = Arc::new(EventHub::in_memory(clock.clone()));
        let ttl = chrono::Duration::seconds(5);
        let registry = DeviceRegistry::new(clock.clone(), hub, ttl);
        registry.put("d", heavy_hex_20(true)).map_err(|e| e.to_string())?;

        let first = registry.cached("d").ok_or("device missing")?;
        let mutated = registry.put("d", heavy_hex_20(true).zero_noise()).map_err(|e| e.to_string())?;
        let second = registry.cached("d").ok_or("device missing")?;
        check(second.snapshot_version >= mutated.snapshot_version, || {
            format!("read v{} after mutation to v{}", second.snapshot_version, mutated.snapshot_version)
        })?;
        check(second.snapshot_version > first.snapshot_version, || "version did not advance".into())?;

        let before = registry.stats();
        for _ in 0..100 {
            clock.advance(chrono::Duration::milliseconds(10));
            registry.cached("d").ok_or("device missing")?;
        }
        let after = registry.stats();
        let hits = after.hits - before.hits;
        check(hits == 100 && after.misses == before.misses, || format!("{before:?} -> {after:?}"))?;

        clock.advance(ttl);
        registry.cached("d").ok_or("device missing")?;
        let expired = registry.stats();
        check(expired.misses == after.misses + 1 && expired.hits == after.hits, || {
            format!("{after:?} -> {expired:?}")
        })?;
        within(30.0, started)?;
        Ok(format!(
            "read v{} -> mutate v{} -> read v{}; 100 in-TTL reads = {hits} hits; post-TTL read = 1 miss",
            first.snapshot_version, mutated.snapshot_version, second.snapshot_version
        ))
    });
}

fn publish_one(hub: &EventHub, i: u64) {
    hub.publish(EventType::TaskQueued, Some(&format!("t{i}")), None, serde_json::json!({ "i": i }));
}

/// A subscriber drained on its own thread; `seen` counts what it received.
struct Reader {
    seen: Arc<AtomicU64>,
    thread: thread::JoinHandle<Vec<u64>>,
}

fn reader(mut sub: vqpu_server::events::Subscription) -> Reader {
    let seen = Arc::new(AtomicU64::new(0));
    let counter = seen.clone();
    let thread = thread::spawn(move || {
        let mut got = Vec::new();
        while let Some(e) = sub.live.blocking_recv() {
            got.push(e.sequence);
            counter.fetch_add(1, Ordering::Release);
        }
        got
    });
    Reader { seen, thread }
}

/// Publishes `n` events in bursts no larger than half the queue capacity,
/// letting every reader catch up between bursts, so a reader that keeps up
/// is never overrun. Returns the time spent inside `publish` only.
fn paced_publish(hub: &EventHub, n: u64, readers: &[&Reader], on_each: &mut dyn FnMut(u64)) -> Duration {
    let burst = (hub.capacity() as u64 / 2).max(1);
    let mut spent = Duration::ZERO;
    let targets: Vec<u64> = readers.iter().map(|r| r.seen.load(Ordering::Acquire)).collect();
    let mut sent = 0;
    while sent < n {
        let k = burst.min(n - sent);
        for i in 0..k {
            let t = Instant::now();
            publish_one(hub, sent + i);
            spent += t.elapsed();
            on_each(sent + i + 1);
        }
        sent += k;
        for (r, base) in readers.iter().zip(&targets) {
            while r.seen.load(Ordering::Acquire) < base + sent {
                thread::yield_now();
            }
        }
    }
    spent
}

/// Mean publish time with one draining subscriber, optionally joined by a
/// second that is never read.
fn publish_trial(dir: &Path, trial: usize, stalled: bool, events: u64) -> f64 {
    let clock = Arc::new(vqpu_core::clock::SystemClock);
    let hub = EventHub::open(clock, &dir.join(format!("trial-{trial}.jsonl")), 10_000, 256).unwrap();
    let fast = reader(hub.subscribe(None));
    let _parked = stalled.then(|| hub.subscribe(None));
    let took = paced_publish(&hub, events, &[&fast], &mut |_| {});
    drop(hub);
    took.as_secs_f64() / events as f64
}

#[test]
fn criterion_09_sse_contract() {
    criterion(9, "SSE contract", || {
        let started = Instant::now();
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(vqpu_core::clock::SystemClock);
        let capacity = 256;
        let hub = EventHub::open(clock, &dir.path().join("events.jsonl"), 10_000, capacity).unwrap();

        for i in 0..500 {
            publish_one(&hub, i);
        }
        let k = 137;
        let mut replaying = hub.subscribe(Some(k));
        for i in 0..100 {
            publish_one(&hub, i);
        }
        let n = hub.last_sequence();
        let mut seen: Vec<u64> = replaying.replay.iter().map(|e| e.sequence).collect();
        while let Ok(e) = replaying.live.try_recv() {
            seen.push(e.sequence);
        }
        let expected: Vec<u64> = (k + 1..=n).collect();
        check(seen == expected, || format!("replay from {k} delivered {} events, expected {}", seen.len(), expected.len()))?;
        hub.unsubscribe(replaying.id);

        let fast = reader(hub.subscribe(None));
        let stalled = hub.subscribe(None);
        let base = hub.last_sequence();
        let dropped_before = hub.disconnected_count();
        let mut dropped_at = None;
        paced_publish(&hub, 2000, &[&fast], &mut |i| {
            if dropped_at.is_none() && hub.disconnected_count() > dropped_before {
                dropped_at = Some(i);
            }
        });
        let last = hub.last_sequence();
        let still_subscribed = hub.subscriber_count();
        drop(stalled);
        drop(hub);
        let got = fast.thread.join().unwrap();
        let dropped_at = dropped_at.ok_or("stalled subscriber was never disconnected")?;
        check(dropped_at <= capacity as u64 + 1, || format!("stalled subscriber dropped after {dropped_at} events"))?;
        check(still_subscribed == 1, || format!("{still_subscribed} subscribers left, expected only the fast one"))?;
        let full: Vec<u64> = (base + 1..=last).collect();
        check(got == full, || format!("fast subscriber saw {} of {} events", got.len(), full.len()))?;

        let events = 5000;
        let mut baseline = Vec::new();
        let mut with_stall = Vec::new();
        for trial in 0..7 {
            baseline.push(publish_trial(dir.path(), trial * 2, false, events));
            with_stall.push(publish_trial(dir.path(), trial * 2 + 1, true, events));
        }
        let b = vqpu::experiments::median(&mut baseline);
        let s = vqpu::experiments::median(&mut with_stall);
        let change = (s - b) / b;
        check(change.abs() <= 0.10, || {
            format!("publish latency {:.2}µs vs {:.2}µs ({:+.1}%)", s * 1e6, b * 1e6, change * 100.0)
        })?;
        within(60.0, started)?;
        Ok(format!(
            "replay from {k} gave {}..={n} gap-free; stalled subscriber dropped after {dropped_at} events \
             (capacity {capacity}); fast subscriber saw all {}; publish {:.2}µs vs baseline {:.2}µs ({:+.1}%)",
            k + 1,
            full.len(),
            s * 1e6,
            b * 1e6,
            change * 100.0
        ))
    });
}

#[test]
fn criterion_10_hermetic_replay() {
    criterion(10, "hermetic replay", || {
        let b = batch();
        let report = b.report.as_ref().map_err(|e| format!("criterion 3 batch unavailable: {e}"))?;
        let started = Instant::now();
        let completed: Vec<_> = report.tasks.iter().filter(|t| t.state == TaskState::Completed && t.run_dirs.len() == 1).collect();
        check(completed.len() >= 10, || format!("only {} preserved run directories", completed.len()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(1010);
        let chosen: Vec<_> = completed.choose_multiple(&mut rng, 10).collect();
        let scratch = tempfile::tempdir().unwrap();
        let runner = scratch.path().join("vqpu-runner");
        fs::copy(binaries().runner, &runner).map_err(|e| format!("cannot stage runner: {e}"))?;
        for t in &chosen {
            let original = &t.run_dirs[0];
            let copy = scratch.path().join(&t.task_id);
            fs::create_dir_all(&copy).unwrap();
            fs::copy(original.join(PAYLOAD_FILE), copy.join(PAYLOAD_FILE)).map_err(|e| e.to_string())?;
            let out = Command::new("unshare")
                .arg("-rn")
                .arg(&runner)
                .arg(&copy)
                .output()
                .map_err(|e| format!("cannot start no-network harness: {e}"))?;
            check(out.status.success(), || {
                format!("{}: replay exited {:?}: {}", t.task_id, out.status.code(), String::from_utf8_lossy(&out.stderr))
            })?;
            let before = fs::read(original.join(RESULT_FILE)).map_err(|e| e.to_string())?;
            let after = fs::read(copy.join(RESULT_FILE)).map_err(|e| e.to_string())?;
            check(before == after, || format!("{}: result.json differs after replay", t.task_id))?;
        }
        within(60.0, started)?;
        Ok(format!("{}/10 preserved run directories replayed without network, result.json byte-identical", chosen.len()))
    });
}
