use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Barrier};
use std::thread;

use chrono::{DateTime, Duration};
use vqpu_core::clock::{ManualClock, SystemClock};
use vqpu_core::fixtures::heavy_hex_20;
use vqpu_core::{EventType, TaskState};
use vqpu_server::conformance::run_random_sequences;
use vqpu_server::store::NewTask;
use vqpu_server::{DeviceRegistry, EventHub, TaskStore};

fn new_task(device: &str) -> NewTask {
    NewTask {
        circuit_source: "qubits 2\ncz 0 1".into(),
        dialect: "nqasm-1".into(),
        shots: 8,
        device_id: device.into(),
        seed: 3,
        submitted_by: "u".into(),
    }
}

fn stress(agents: usize, tasks: usize) {
    let clock = Arc::new(SystemClock);
    let hub = Arc::new(EventHub::in_memory(clock.clone()));
    let registry = Arc::new(DeviceRegistry::new(clock.clone(), hub.clone(), Duration::seconds(5)));
    registry.put("hh", heavy_hex_20(true)).unwrap();
    let store = Arc::new(TaskStore::new(clock, hub.clone()));
    let enqueued: BTreeSet<String> = (0..tasks).map(|_| store.enqueue(new_task("hh")).unwrap().task_id).collect();

    let barrier = Arc::new(Barrier::new(agents));
    let handles: Vec<_> = (0..agents)
        .map(|a| {
            let (store, registry, barrier) = (store.clone(), registry.clone(), barrier.clone());
            thread::spawn(move || {
                let me = format!("agent-{a}");
                let provider = |d: &str| registry.authoritative(d);
                barrier.wait();
                let mut got = Vec::new();
                while let Some((rec, _)) = store.claim(&me, &provider).unwrap() {
                    got.push(rec.task_id);
                }
                (me, got)
            })
        })
        .collect();

    let mut owners: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for h in handles {
        let (me, got) = h.join().unwrap();
        for t in got {
            owners.entry(t).or_default().push(me.clone());
        }
    }
    assert_eq!(owners.len(), tasks, "every task granted");
    assert!(owners.values().all(|o| o.len() == 1), "a task was granted twice");
    assert_eq!(owners.keys().cloned().collect::<BTreeSet<_>>(), enqueued);
    for (task, o) in &owners {
        let rec = store.get(task).unwrap();
        assert_eq!(rec.state, TaskState::Running);
        assert_eq!(rec.owner.as_ref(), Some(&o[0]));
    }
    let running_events = hub.retained().iter().filter(|e| e.event_type == EventType::TaskRunning).count();
    assert_eq!(running_events, tasks);
}

#[test]
fn exactly_once_claim_two_agents_fifty_tasks() {
    stress(2, 50);
}

#[test]
fn exactly_once_claim_eight_agents_five_hundred_tasks() {
    stress(8, 500);
}

#[test]
fn exactly_once_claim_eight_agents_fifty_tasks() {
    stress(8, 50);
}

#[test]
fn bound_snapshot_is_byte_stable_across_device_mutation() {
    let clock = Arc::new(ManualClock::new(DateTime::UNIX_EPOCH));
    let hub = Arc::new(EventHub::in_memory(clock.clone()));
    let registry = DeviceRegistry::new(clock.clone(), hub.clone(), Duration::seconds(5));
    registry.put("hh", heavy_hex_20(true)).unwrap();
    let store = TaskStore::new(clock, hub);
    let t = store.enqueue(new_task("hh")).unwrap();
    let (rec, bound) = store.claim("a", &|d| registry.authoritative(d)).unwrap().unwrap();
    let before = rec.bound_snapshot.unwrap().canonical_json();
    assert_eq!(before, bound.canonical_json());
    registry.mutate("hh", heavy_hex_20(false)).unwrap();
    registry.mutate("hh", heavy_hex_20(true).zero_noise()).unwrap();
    let after = store.get(&t.task_id).unwrap().bound_snapshot.unwrap().canonical_json();
    assert_eq!(before, after);
}

#[test]
fn claim_binds_post_mutation_snapshot() {
    let clock = Arc::new(SystemClock);
    let hub = Arc::new(EventHub::in_memory(clock.clone()));
    let registry = DeviceRegistry::new(clock.clone(), hub.clone(), Duration::seconds(60));
    registry.put("hh", heavy_hex_20(true)).unwrap();
    let store = TaskStore::new(clock, hub);
    store.enqueue(new_task("hh")).unwrap();
    // Warm the cache with the noisy version; the claim must not use it.
    assert_eq!(registry.cached("hh").unwrap().snapshot_version, 1);
    let v2 = registry.mutate("hh", heavy_hex_20(false)).unwrap();
    let (_, bound) = store.claim("a", &|d| registry.authoritative(d)).unwrap().unwrap();
    assert_eq!(bound.snapshot_version, v2.snapshot_version);
    assert_eq!(bound.canonical_json(), v2.canonical_json());
}

#[test]
fn randomized_lifecycle_sequences_conform() {
    let report = run_random_sequences(10_000, 30, 11);
    assert!(report.passed(), "{report:?}");
    assert_eq!(report.edges_seen.len(), vqpu_core::task::LEGAL_EDGES.len());
}
