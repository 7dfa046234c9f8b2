//! The `vqpu` command line.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;
use vqpu_core::task::SubmitRequest;
use vqpu_core::{DeviceSnapshot, ErrorEnvelope, LifecycleEvent, TaskRecord, TaskState, DIALECT_NQASM1};

use crate::api::{Api, ApiError};
use crate::experiments::{self, Lab, Report};
use crate::harness::Binaries;

pub const EXIT_OK: i32 = 0;
pub const EXIT_API: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NOT_TERMINAL: i32 = 3;
pub const EXIT_TRANSPORT: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "vqpu", version, about = "Client and operator tool for the virtual-QPU service")]
pub struct Cli {
    /// Base URL of the control plane.
    #[arg(long, global = true, env = "VQPU_SERVER_URL", default_value = "http://127.0.0.1:8080")]
    pub server: String,
    #[arg(long, global = true, env = "VQPU_API_KEY", default_value = "dev-user", hide_env_values = true)]
    pub api_key: String,
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Submit a circuit file and print the task id.
    Submit(CircuitArgs),
    /// Validate a circuit against the current device view without queueing it.
    Check(CircuitArgs),
    /// Show a task record.
    Status { task_id: String },
    /// Print the counts of a completed task.
    Result { task_id: String },
    Cancel { task_id: String },
    /// List tasks, optionally filtered.
    List {
        #[arg(long)]
        state: Option<String>,
        #[arg(long)]
        device: Option<String>,
    },
    /// Stream lifecycle events.
    Watch {
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        device: Option<String>,
        /// Replay every retained event after this sequence number first.
        #[arg(long)]
        from_sequence: Option<u64>,
        /// Exit after printing this many events.
        #[arg(long)]
        count: Option<usize>,
    },
    #[command(subcommand)]
    Device(DeviceCommand),
    #[command(subcommand)]
    Task(TaskCommand),
    #[command(subcommand)]
    Stale(StaleCommand),
    /// Delete local run directories whose tasks are terminal on the server.
    Gc {
        /// Agent work directory holding one run directory per task.
        #[arg(long)]
        work_dir: PathBuf,
        /// Keep directories modified more recently than this.
        #[arg(long, default_value_t = 0.0)]
        older_than_s: f64,
        #[arg(long)]
        dry_run: bool,
    },
    /// Run an evaluation scenario against the server.
    Exp(ExpArgs),
}

#[derive(Debug, Args)]
pub struct CircuitArgs {
    #[arg(long)]
    pub device: String,
    #[arg(long, default_value_t = 1024)]
    pub shots: u64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = DIALECT_NQASM1)]
    pub dialect: String,
    pub circuit: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum DeviceCommand {
    /// Create or replace a device from a JSON document.
    Put {
        file: PathBuf,
        /// Device id; defaults to the document's `device_id`, then the file stem.
        /// When given, it replaces the document's own `device_id`.
        #[arg(long)]
        id: Option<String>,
    },
    Get { device_id: String },
    List,
    Delete { device_id: String },
    History { device_id: String },
}

#[derive(Debug, Subcommand)]
pub enum TaskCommand {
    /// Return a RUNNING task to QUEUED.
    Requeue { task_id: String },
    /// Mark a task FAILED by administrative decision.
    ForceFail {
        task_id: String,
        #[arg(long)]
        message: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum StaleCommand {
    /// RUNNING tasks whose owner has been silent for the liveness window.
    List {
        #[arg(long)]
        window_s: Option<f64>,
    },
}

#[derive(Debug, Args)]
pub struct ExpArgs {
    #[command(subcommand)]
    pub scenario: Scenario,
    /// Write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = "VQPU_AGENT_KEY", default_value = "dev-agent", hide_env_values = true)]
    pub agent_key: String,
    #[arg(long, env = "VQPU_ADMIN_KEY", default_value = "dev-admin", hide_env_values = true)]
    pub admin_key: String,
    /// Directory holding vqpu-agent and vqpu-runner.
    #[arg(long, env = "VQPU_BIN_DIR")]
    pub bin_dir: Option<PathBuf>,
    /// Parent directory for agent work directories; a fresh one is kept under
    /// the system temp directory by default.
    #[arg(long)]
    pub work_root: Option<PathBuf>,
    /// Process id of a local server, enabling its socket audit.
    #[arg(long)]
    pub server_pid: Option<u32>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Scenario {
    Binding,
    Fidelity,
    Concurrency,
    Recovery {
        /// Liveness window the server runs with.
        #[arg(long, default_value_t = 5.0)]
        liveness_window_s: f64,
    },
    Latency,
}

/// What a verb failed with, mapped onto the exit code.
enum Failure {
    Api(ApiError),
    Usage(String),
    NotTerminal(TaskRecord),
    Other(i32, String),
}

impl From<ApiError> for Failure {
    fn from(e: ApiError) -> Self {
        Failure::Api(e)
    }
}

type Outcome = Result<(), Failure>;

struct Ctx {
    api: Api,
    json: bool,
}

impl Ctx {
    fn emit<T: Serialize>(&self, value: &T, text: impl FnOnce() -> String) {
        let mut out = std::io::stdout().lock();
        if self.json {
            let _ = writeln!(out, "{}", serde_json::to_string_pretty(value).unwrap_or_default());
        } else {
            let _ = writeln!(out, "{}", text());
        }
    }
}

pub fn run(cli: Cli) -> i32 {
    let ctx = Ctx { api: Api::new(&cli.server, &cli.api_key), json: cli.json };
    match dispatch(&ctx, cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure::Api(ApiError::Transport(m))) => {
            eprintln!("error: cannot reach server: {m}");
            EXIT_TRANSPORT
        }
        Err(Failure::Api(ApiError::Server { status, envelope })) => {
            render_envelope(status, &envelope);
            EXIT_API
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(Failure::NotTerminal(r)) => {
            eprintln!("task {} is not terminal (state {})", r.task_id, r.state);
            EXIT_NOT_TERMINAL
        }
        Err(Failure::Other(code, m)) => {
            if !m.is_empty() {
                eprintln!("{m}");
            }
            code
        }
    }
}

fn render_envelope(status: u16, e: &ErrorEnvelope) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "error: {} (HTTP {status}): {}", e.code, e.message);
    if let Some(detail) = &e.detail {
        let _ = writeln!(err, "  detail: {detail}");
    }
}

fn read_circuit(args: &CircuitArgs) -> Result<SubmitRequest, Failure> {
    let source = fs::read_to_string(&args.circuit)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", args.circuit.display())))?;
    Ok(SubmitRequest {
        circuit_source: source,
        dialect: args.dialect.clone(),
        shots: args.shots,
        device_id: args.device.clone(),
        seed: args.seed,
    })
}

fn task_line(r: &TaskRecord) -> String {
    let mut line = format!("{}  {:<9}  device={}  shots={}", r.task_id, r.state.as_str(), r.device_id, r.shots);
    if let Some(o) = &r.owner {
        line.push_str(&format!("  owner={o}"));
    }
    if let Some(s) = &r.bound_snapshot {
        line.push_str(&format!("  snapshot=v{}", s.snapshot_version));
    }
    if let Some(e) = &r.error {
        line.push_str(&format!("  error={}", e.code));
    }
    line
}

fn device_line(d: &DeviceSnapshot) -> String {
    let online = d.qubits.iter().filter(|q| q.state == vqpu_core::QubitState::Online).count();
    format!(
        "{}  v{}  qubits={} online={} edges={} captured_at={}",
        d.device_id,
        d.snapshot_version,
        d.num_qubits,
        online,
        d.edges.len(),
        d.captured_at.to_rfc3339()
    )
}

fn event_line(e: &LifecycleEvent) -> String {
    let mut line = format!("{:>6}  {}  {}", e.sequence, e.timestamp.to_rfc3339(), e.event_type);
    if let Some(t) = &e.task_id {
        line.push_str(&format!("  task={t}"));
    }
    if let Some(d) = &e.device_id {
        line.push_str(&format!("  device={d}"));
    }
    line
}

fn dispatch(ctx: &Ctx, command: Command) -> Outcome {
    let api = &ctx.api;
    match command {
        Command::Submit(args) => {
            let r = api.submit(&read_circuit(&args)?)?;
            ctx.emit(&r, || r.task_id.clone());
        }
        Command::Check(args) => {
            let v = api.check(&read_circuit(&args)?)?;
            ctx.emit(&v, || match &v.code {
                None => format!("admissible on {} v{}", v.device_id, v.snapshot_version),
                Some(code) => format!(
                    "not admissible on {} v{}: {code}{}: {}",
                    v.device_id,
                    v.snapshot_version,
                    v.line.map(|l| format!(" (line {l})")).unwrap_or_default(),
                    v.message.clone().unwrap_or_default()
                ),
            });
            if !v.admissible {
                return Err(Failure::Other(EXIT_API, String::new()));
            }
        }
        Command::Status { task_id } => {
            let r = api.task(&task_id)?;
            ctx.emit(&r, || task_line(&r));
        }
        Command::Result { task_id } => {
            let r = api.task(&task_id)?;
            match r.state {
                TaskState::Completed => {
                    let result = r.result.as_ref().expect("completed tasks carry a result");
                    ctx.emit(result, || {
                        result.counts.iter().map(|(k, v)| format!("{k} {v}")).collect::<Vec<_>>().join("\n")
                    });
                }
                TaskState::Failed => {
                    let e = r.error.clone().expect("failed tasks carry an error");
                    ctx.emit(&e, || format!("FAILED: {} {}", e.code, e.message));
                    return Err(Failure::Other(EXIT_API, String::new()));
                }
                TaskState::Cancelled => {
                    ctx.emit(&r, || "CANCELLED".into());
                    return Err(Failure::Other(EXIT_API, String::new()));
                }
                TaskState::Queued | TaskState::Running => return Err(Failure::NotTerminal(r)),
            }
        }
        Command::Cancel { task_id } => {
            let r = api.cancel(&task_id)?;
            ctx.emit(&r, || task_line(&r));
        }
        Command::List { state, device } => {
            if let Some(s) = &state {
                if TaskState::parse(s).is_none() {
                    return Err(Failure::Usage(format!("unknown state '{s}'")));
                }
            }
            let rs = api.tasks(state.as_deref(), device.as_deref())?;
            ctx.emit(&rs, || rs.iter().map(task_line).collect::<Vec<_>>().join("\n"));
        }
        Command::Watch { task, device, from_sequence, count } => {
            let rx = api.events(from_sequence)?;
            let mut printed = 0;
            let mut out = std::io::stdout().lock();
            for frame in rx {
                let Some(e) = frame.lifecycle() else { continue };
                if task.as_ref().is_some_and(|t| e.task_id.as_ref() != Some(t)) {
                    continue;
                }
                if device.as_ref().is_some_and(|d| e.device_id.as_ref() != Some(d)) {
                    continue;
                }
                let line = if ctx.json { serde_json::to_string(&e).unwrap_or_default() } else { event_line(&e) };
                if writeln!(out, "{line}").and_then(|_| out.flush()).is_err() {
                    return Ok(());
                }
                printed += 1;
                if count.is_some_and(|c| printed >= c) {
                    return Ok(());
                }
            }
            return Err(Failure::Other(EXIT_TRANSPORT, "event stream closed".into()));
        }
        Command::Device(d) => device_verb(ctx, d)?,
        Command::Task(TaskCommand::Requeue { task_id }) => {
            let r = api.requeue(&task_id)?;
            ctx.emit(&r, || task_line(&r));
        }
        Command::Task(TaskCommand::ForceFail { task_id, message }) => {
            let r = api.force_fail(&task_id, message)?;
            ctx.emit(&r, || task_line(&r));
        }
        Command::Stale(StaleCommand::List { window_s }) => {
            let rs = api.stale(window_s)?;
            ctx.emit(&rs, || rs.iter().map(task_line).collect::<Vec<_>>().join("\n"));
        }
        Command::Gc { work_dir, older_than_s, dry_run } => gc(ctx, &work_dir, older_than_s, dry_run)?,
        Command::Exp(args) => experiment(ctx, args)?,
    }
    Ok(())
}

fn device_verb(ctx: &Ctx, d: DeviceCommand) -> Outcome {
    let api = &ctx.api;
    match d {
        DeviceCommand::Put { file, id } => {
            let raw = fs::read_to_string(&file)
                .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", file.display())))?;
            let mut doc: Value = serde_json::from_str(&raw)
                .map_err(|e| Failure::Usage(format!("{} is not JSON: {e}", file.display())))?;
            let id = id
                .or_else(|| doc.get("device_id").and_then(Value::as_str).map(str::to_string))
                .or_else(|| file.file_stem().map(|s| s.to_string_lossy().into_owned()))
                .ok_or_else(|| Failure::Usage("cannot infer a device id; pass --id".into()))?;
            if let Some(obj) = doc.as_object_mut().filter(|o| o.contains_key("device_id")) {
                obj.insert("device_id".into(), Value::String(id.clone()));
            }
            let (snap, created) = api.put_device(&id, &doc)?;
            ctx.emit(&snap, || format!("{} {}", if created { "created" } else { "updated" }, device_line(&snap)));
        }
        DeviceCommand::Get { device_id } => {
            let s = api.device(&device_id)?;
            ctx.emit(&s, || device_line(&s));
        }
        DeviceCommand::List => {
            let ds = api.devices()?;
            ctx.emit(&ds, || ds.iter().map(device_line).collect::<Vec<_>>().join("\n"));
        }
        DeviceCommand::Delete { device_id } => {
            let s = api.delete_device(&device_id)?;
            ctx.emit(&s, || format!("deleted {}", device_line(&s)));
        }
        DeviceCommand::History { device_id } => {
            let hs = api.device_history(&device_id)?;
            ctx.emit(&hs, || hs.iter().map(device_line).collect::<Vec<_>>().join("\n"));
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct GcReport {
    removed: Vec<PathBuf>,
    kept: Vec<PathBuf>,
    dry_run: bool,
}

fn gc(ctx: &Ctx, work_dir: &Path, older_than_s: f64, dry_run: bool) -> Outcome {
    let entries = fs::read_dir(work_dir)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", work_dir.display())))?;
    let cutoff = SystemTime::now()
        .checked_sub(Duration::from_secs_f64(older_than_s.max(0.0)))
        .unwrap_or(SystemTime::UNIX_EPOCH);
    let mut report = GcReport { removed: Vec::new(), kept: Vec::new(), dry_run };
    for entry in entries.flatten() {
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let task_id = entry.file_name().to_string_lossy().into_owned();
        let old_enough = entry.metadata().and_then(|m| m.modified()).is_ok_and(|m| m <= cutoff);
        let terminal = match ctx.api.task(&task_id) {
            Ok(r) => r.state.is_terminal(),
            Err(ApiError::Server { status: 404, .. }) => false,
            Err(e) => return Err(e.into()),
        };
        if terminal && old_enough {
            if !dry_run {
                fs::remove_dir_all(&path)
                    .map_err(|e| Failure::Other(EXIT_API, format!("cannot remove {}: {e}", path.display())))?;
            }
            report.removed.push(path);
        } else {
            report.kept.push(path);
        }
    }
    report.removed.sort();
    report.kept.sort();
    ctx.emit(&report, || {
        let verb = if dry_run { "would remove" } else { "removed" };
        let mut lines: Vec<String> = report.removed.iter().map(|p| format!("{verb} {}", p.display())).collect();
        lines.push(format!("{} removed, {} kept", report.removed.len(), report.kept.len()));
        lines.join("\n")
    });
    Ok(())
}

fn experiment(ctx: &Ctx, args: ExpArgs) -> Outcome {
    let binaries = match &args.bin_dir {
        Some(dir) => Binaries::in_dir(dir),
        None => Binaries::discover().map_err(|e| Failure::Usage(format!("{e}; pass --bin-dir")))?,
    };
    let work_root = match args.work_root.clone() {
        Some(p) => p,
        None => tempfile::Builder::new()
            .prefix("vqpu-exp-")
            .tempdir()
            .map_err(|e| Failure::Other(EXIT_API, format!("cannot create work root: {e}")))?
            .keep(),
    };
    let tag = format!("{:x}", rand::random::<u32>());
    let lab = Lab {
        user: ctx.api.clone(),
        admin: ctx.api.with_key(&args.admin_key),
        agent_key: args.agent_key.clone(),
        binaries,
        work_root: work_root.clone(),
        server_pid: args.server_pid,
        tag,
    };
    let fail = |e: experiments::ExpError| Failure::Other(EXIT_API, format!("experiment aborted: {e}"));
    let (json, summary, passed) = match args.scenario {
        Scenario::Binding => finish(experiments::binding::run(&lab, &Default::default()).map_err(fail)?),
        Scenario::Fidelity => finish(experiments::fidelity::run(&lab, &Default::default()).map_err(fail)?),
        Scenario::Concurrency => finish(experiments::concurrency::run(&lab, &Default::default()).map_err(fail)?),
        Scenario::Recovery { liveness_window_s } => {
            let params = experiments::recovery::RecoveryParams { liveness_window_s, ..Default::default() };
            finish(experiments::recovery::run(&lab, &params).map_err(fail)?)
        }
        Scenario::Latency => finish(experiments::latency::run(&lab, &Default::default()).map_err(fail)?),
    };
    if let Some(out) = &args.out {
        fs::write(out, format!("{json}\n"))
            .map_err(|e| Failure::Other(EXIT_API, format!("cannot write {}: {e}", out.display())))?;
    }
    if ctx.json {
        println!("{json}");
    } else {
        println!("{} {summary}", if passed { "PASS" } else { "FAIL" });
        println!("work directories kept under {}", work_root.display());
    }
    if passed {
        Ok(())
    } else {
        Err(Failure::Other(EXIT_API, String::new()))
    }
}

fn finish<R: Report>(report: R) -> (String, String, bool) {
    let mut value = serde_json::to_value(&report).unwrap_or(Value::Null);
    if let Value::Object(map) = &mut value {
        map.insert("summary".into(), Value::String(report.summary()));
    }
    (serde_json::to_string_pretty(&value).unwrap_or_default(), report.summary(), report.passed())
}
