//! Agent configuration, read from a TOML file.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid configuration: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("VQPU_AGENT_CONFIG is not set")]
    Unset,
}

fn default_interval() -> f64 {
    30.0
}

fn default_slots() -> usize {
    2
}

fn default_finalise() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub server_url: String,
    pub api_key: String,
    pub agent_id: String,
    #[serde(default = "default_interval")]
    pub poll_interval_s: f64,
    #[serde(default = "default_interval")]
    pub heartbeat_interval_s: f64,
    #[serde(default = "default_slots")]
    pub max_slots: usize,
    pub work_dir: PathBuf,
    /// How often owned jobs are checked for terminal state.
    #[serde(default = "default_finalise")]
    pub finalise_interval_s: f64,
    /// Path of the `vqpu-runner` executable. Defaults to a sibling of the
    /// running executable.
    #[serde(default)]
    pub runner_path: Option<PathBuf>,
    #[serde(default)]
    pub backend: BackendConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    Local,
    Simulated(FaultPlan),
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Local
    }
}

/// Behaviour of the simulated batch scheduler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultPlan {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_slots")]
    pub capacity: usize,
    #[serde(default)]
    pub queue_delay: DelaySpec,
    /// Minimum time a started job occupies its slot.
    #[serde(default)]
    pub run_duration: DelaySpec,
    #[serde(default)]
    pub injections: Vec<Injection>,
    /// Prefix distinguishing job ids of one scheduler incarnation; random
    /// when absent.
    #[serde(default)]
    pub instance: Option<String>,
}

impl Default for FaultPlan {
    fn default() -> Self {
        Self {
            seed: 0,
            capacity: default_slots(),
            queue_delay: DelaySpec::default(),
            run_duration: DelaySpec::default(),
            injections: Vec::new(),
            instance: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DelaySpec {
    Fixed { seconds: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl Default for DelaySpec {
    fn default() -> Self {
        DelaySpec::Fixed { seconds: 0.0 }
    }
}

impl DelaySpec {
    pub fn validate(&self) -> Result<(), String> {
        match *self {
            DelaySpec::Fixed { seconds } if seconds.is_finite() && seconds >= 0.0 => Ok(()),
            DelaySpec::Uniform { lo, hi } if lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi => Ok(()),
            other => Err(format!("bad duration distribution {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Injection {
    /// Zero-based submission ordinal within one scheduler instance.
    #[serde(default)]
    pub ordinal: Option<u64>,
    /// Substring matched against the job name.
    #[serde(default)]
    pub name: Option<String>,
    pub fault: Fault,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE", deny_unknown_fields)]
pub enum Fault {
    NeverStart,
    KillAfter { seconds: f64 },
    LoseArtifact,
}

impl Injection {
    pub fn matches(&self, ordinal: u64, job_name: &str) -> bool {
        self.ordinal.is_some_and(|o| o == ordinal) || self.name.as_deref().is_some_and(|n| job_name.contains(n))
    }
}

impl AgentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: AgentConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::from_toml(&text)
    }

    pub fn from_env() -> Result<Self, ConfigError> {
        let path = std::env::var_os("VQPU_AGENT_CONFIG").ok_or(ConfigError::Unset)?;
        Self::load(Path::new(&path))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.agent_id.trim().is_empty() {
            return bad("agent_id must not be empty".into());
        }
        if !(self.server_url.starts_with("http://") || self.server_url.starts_with("https://")) {
            return bad(format!("server_url '{}' is not an http(s) URL", self.server_url));
        }
        if self.max_slots == 0 {
            return bad("max_slots must be at least 1".into());
        }
        for (name, v) in [
            ("poll_interval_s", self.poll_interval_s),
            ("heartbeat_interval_s", self.heartbeat_interval_s),
            ("finalise_interval_s", self.finalise_interval_s),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive"));
            }
        }
        if let BackendConfig::Simulated(plan) = &self.backend {
            if plan.capacity == 0 {
                return bad("backend.capacity must be at least 1".into());
            }
            plan.queue_delay.validate().map_err(ConfigError::Invalid)?;
            plan.run_duration.validate().map_err(ConfigError::Invalid)?;
            for inj in &plan.injections {
                if inj.ordinal.is_none() && inj.name.is_none() {
                    return bad("an injection needs an ordinal or a name".into());
                }
                if let Fault::KillAfter { seconds } = inj.fault {
                    if !(seconds.is_finite() && seconds >= 0.0) {
                        return bad("KILL_AFTER seconds must be non-negative".into());
                    }
                }
            }
        }
        Ok(())
    }

    pub fn poll_interval(&self) -> Duration {
        Duration::from_secs_f64(self.poll_interval_s)
    }

    pub fn heartbeat_interval(&self) -> Duration {
        Duration::from_secs_f64(self.heartbeat_interval_s)
    }

    pub fn finalise_interval(&self) -> Duration {
        Duration::from_secs_f64(self.finalise_interval_s)
    }

    pub fn resolved_runner_path(&self) -> PathBuf {
        if let Some(p) = &self.runner_path {
            return p.clone();
        }
        let name = format!("vqpu-runner{}", std::env::consts::EXE_SUFFIX);
        std::env::current_exe()
            .ok()
            .and_then(|exe| exe.parent().map(|d| d.join(&name)))
            .unwrap_or_else(|| PathBuf::from(name))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = r#"
server_url = "http://127.0.0.1:8080"
api_key = "k"
agent_id = "a1"
work_dir = "/tmp/w"
max_slots = 2

[backend]
kind = "simulated"
seed = 7
capacity = 2
queue_delay = { kind = "uniform", lo = 0.5, hi = 1.5 }
run_duration = { kind = "fixed", seconds = 2.0 }

[[backend.injections]]
ordinal = 3
fault = { kind = "KILL_AFTER", seconds = 1.0 }

[[backend.injections]]
name = "abc"
fault = { kind = "LOSE_ARTIFACT" }
"#;

    #[test]
    fn parses_full_simulated_config() {
        let c = AgentConfig::from_toml(FULL).unwrap();
        assert_eq!(c.poll_interval_s, 30.0);
        assert_eq!(c.heartbeat_interval_s, 30.0);
        let BackendConfig::Simulated(plan) = c.backend else { panic!("expected simulated backend") };
        assert_eq!(plan.queue_delay, DelaySpec::Uniform { lo: 0.5, hi: 1.5 });
        assert_eq!(plan.injections[0].fault, Fault::KillAfter { seconds: 1.0 });
        assert!(plan.injections[1].matches(9, "vqpu-abc-1"));
        assert!(!plan.injections[1].matches(3, "vqpu-xyz"));
        assert!(plan.injections[0].matches(3, "anything"));
    }

    #[test]
    fn defaults_to_local_backend() {
        let c = AgentConfig::from_toml(
            "server_url = \"http://h\"\napi_key = \"k\"\nagent_id = \"a\"\nwork_dir = \"w\"\n",
        )
        .unwrap();
        assert_eq!(c.backend, BackendConfig::Local);
        assert_eq!(c.max_slots, 2);
    }

    #[test]
    fn rejects_bad_values() {
        let base = "server_url = \"http://h\"\napi_key = \"k\"\nagent_id = \"a\"\nwork_dir = \"w\"\n";
        assert!(AgentConfig::from_toml(&format!("{base}max_slots = 0\n")).is_err());
        assert!(AgentConfig::from_toml(&format!("{base}poll_interval_s = -1\n")).is_err());
        assert!(AgentConfig::from_toml(&format!("{base}surprise = 1\n")).is_err());
        assert!(AgentConfig::from_toml(&base.replace("http://h", "ftp://h")).is_err());
        let bad_delay = format!("{base}[backend]\nkind = \"simulated\"\nqueue_delay = {{ kind = \"uniform\", lo = 2, hi = 1 }}\n");
        assert!(AgentConfig::from_toml(&bad_delay).is_err());
        assert!(matches!(AgentConfig::load(Path::new("/nonexistent/agent.toml")), Err(ConfigError::Read { .. })));
    }
}
