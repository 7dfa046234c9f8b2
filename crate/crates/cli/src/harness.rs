//! Process-level harness: locating the binaries, running a server and agents
//! as child processes, and auditing their sockets while they run.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::os::unix::process::CommandExt;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use vqpu_agent::AgentConfig;

use crate::audit::ConnectionAudit;

/// Children die with the thread that spawned them, so an aborted harness
/// leaves no server or agent behind.
fn die_with_parent(cmd: &mut Command) -> &mut Command {
    // SAFETY: prctl is async-signal-safe and touches only the child.
    unsafe {
        cmd.pre_exec(|| {
            libc::prctl(libc::PR_SET_PDEATHSIG, libc::SIGKILL);
            Ok(())
        })
    }
}

/// Paths of the three executables.
#[derive(Debug, Clone)]
pub struct Binaries {
    pub server: PathBuf,
    pub agent: PathBuf,
    pub runner: PathBuf,
}

fn exe(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}{}", std::env::consts::EXE_SUFFIX))
}

impl Binaries {
    pub fn in_dir(dir: &Path) -> Self {
        Self { server: exe(dir, "vqpu-server"), agent: exe(dir, "vqpu-agent"), runner: exe(dir, "vqpu-runner") }
    }

    /// `VQPU_BIN_DIR` when set, otherwise the directory of the running
    /// executable (or its parent, for test binaries under `deps/`).
    pub fn discover() -> io::Result<Self> {
        if let Some(dir) = std::env::var_os("VQPU_BIN_DIR") {
            return Self::in_dir(Path::new(&dir)).checked();
        }
        let current = std::env::current_exe()?;
        let mut dir = current.parent().map(Path::to_path_buf).unwrap_or_default();
        if dir.file_name().is_some_and(|n| n == "deps") {
            dir.pop();
        }
        Self::in_dir(&dir).checked()
    }

    pub fn checked(self) -> io::Result<Self> {
        for p in [&self.server, &self.agent, &self.runner] {
            if !p.is_file() {
                return Err(io::Error::new(io::ErrorKind::NotFound, format!("missing executable {}", p.display())));
            }
        }
        Ok(self)
    }
}

/// Settings for a server child process.
#[derive(Debug, Clone)]
pub struct ServerSettings {
    pub data_dir: PathBuf,
    pub liveness_window_s: f64,
    pub cache_ttl_s: f64,
}

/// A `vqpu-server` child process, killed on drop.
pub struct ServerProcess {
    child: Child,
    pub addr: SocketAddr,
    pub data_dir: PathBuf,
}

impl ServerProcess {
    pub fn start(binary: &Path, settings: &ServerSettings) -> io::Result<Self> {
        fs::create_dir_all(&settings.data_dir)?;
        let log = File::create(settings.data_dir.join("server.log"))?;
        let mut child = die_with_parent(&mut Command::new(binary))
            .env("VQPU_BIND_ADDR", "127.0.0.1:0")
            .env("VQPU_STORE_PATH", settings.data_dir.join("store.jsonl"))
            .env("VQPU_EVENT_LOG_PATH", settings.data_dir.join("events.jsonl"))
            .env("VQPU_LIVENESS_WINDOW_S", settings.liveness_window_s.to_string())
            .env("VQPU_CACHE_TTL_S", settings.cache_ttl_s.to_string())
            .env_remove("VQPU_API_KEYS_FILE")
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(log)
            .spawn()?;
        let stdout = child.stdout.take().expect("stdout is piped");
        let mut lines = BufReader::new(stdout).lines();
        let addr = loop {
            match lines.next() {
                Some(Ok(line)) => {
                    if let Some(a) = line.strip_prefix("listening on ") {
                        break a.trim().parse().map_err(io::Error::other)?;
                    }
                }
                _ => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(io::Error::other(format!(
                        "server exited before listening; see {}",
                        settings.data_dir.join("server.log").display()
                    )));
                }
            }
        };
        thread::spawn(move || for _ in lines {});
        Ok(Self { child, addr, data_dir: settings.data_dir.clone() })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn pid(&self) -> u32 {
        self.child.id()
    }
}

impl Drop for ServerProcess {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// A `vqpu-agent` child process, killed on drop.
pub struct AgentProcess {
    child: Option<Child>,
    pub agent_id: String,
    pub config_path: PathBuf,
    pub log_path: PathBuf,
}

impl AgentProcess {
    /// Writes `config` next to its work directory and starts the agent on it.
    pub fn start(binary: &Path, config: &AgentConfig) -> io::Result<Self> {
        fs::create_dir_all(&config.work_dir)?;
        let parent = config.work_dir.parent().unwrap_or(Path::new("."));
        let config_path = parent.join(format!("{}.toml", config.agent_id));
        let log_path = parent.join(format!("{}.log", config.agent_id));
        fs::write(&config_path, toml::to_string(config).map_err(io::Error::other)?)?;
        let log = fs::OpenOptions::new().create(true).append(true).open(&log_path)?;
        let child = die_with_parent(&mut Command::new(binary))
            .env("VQPU_AGENT_CONFIG", &config_path)
            .env("RUST_LOG", std::env::var("RUST_LOG").unwrap_or_else(|_| "info".into()))
            .stdin(Stdio::null())
            .stdout(log.try_clone()?)
            .stderr(log)
            .spawn()?;
        Ok(Self { child: Some(child), agent_id: config.agent_id.clone(), config_path, log_path })
    }

    pub fn pid(&self) -> Option<u32> {
        self.child.as_ref().map(Child::id)
    }

    /// SIGKILL: the agent gets no chance to clean up.
    pub fn kill(&mut self) -> io::Result<()> {
        if let Some(mut c) = self.child.take() {
            c.kill()?;
            c.wait()?;
        }
        Ok(())
    }

    /// SIGTERM, then waits up to `grace` before killing. Returns the exit
    /// code of a clean exit.
    pub fn terminate(&mut self, grace: Duration) -> io::Result<Option<i32>> {
        let Some(mut c) = self.child.take() else { return Ok(None) };
        // SAFETY: kill(2) with a pid we own and a valid signal number.
        unsafe {
            libc::kill(c.id() as libc::pid_t, libc::SIGTERM);
        }
        let deadline = Instant::now() + grace;
        while Instant::now() < deadline {
            if let Some(status) = c.try_wait()? {
                return Ok(status.code());
            }
            thread::sleep(Duration::from_millis(20));
        }
        c.kill()?;
        c.wait()?;
        Ok(None)
    }

    pub fn log(&self) -> String {
        fs::read_to_string(&self.log_path).unwrap_or_default()
    }
}

impl Drop for AgentProcess {
    fn drop(&mut self) {
        let _ = self.kill();
    }
}

/// Samples a process's sockets on a background thread until stopped.
pub struct AuditSampler {
    stop: Arc<AtomicBool>,
    audit: Arc<Mutex<ConnectionAudit>>,
    thread: Option<JoinHandle<()>>,
}

impl AuditSampler {
    /// Execution-side process: only outbound connections to `server`.
    pub fn outbound(pid: u32, server: SocketAddr, every: Duration) -> Self {
        Self::spawn(every, move |a| a.sample_outbound_only(pid, server))
    }

    /// Service process: only sockets on its bind port.
    pub fn inbound(pid: u32, bind: SocketAddr, every: Duration) -> Self {
        Self::spawn(every, move |a| a.sample_inbound_only(pid, bind))
    }

    fn spawn(every: Duration, sample: impl Fn(&mut ConnectionAudit) -> io::Result<()> + Send + 'static) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let audit = Arc::new(Mutex::new(ConnectionAudit::default()));
        let (s, a) = (stop.clone(), audit.clone());
        let thread = thread::spawn(move || {
            while !s.load(Ordering::Relaxed) {
                // The process may have exited between samples; that is not a finding.
                let _ = sample(&mut a.lock().unwrap());
                thread::sleep(every);
            }
        });
        Self { stop, audit, thread: Some(thread) }
    }

    pub fn finish(mut self) -> ConnectionAudit {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        self.audit.lock().unwrap().clone()
    }
}

impl Drop for AuditSampler {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
    }
}
