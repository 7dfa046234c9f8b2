use std::net::SocketAddr;
use std::path::PathBuf;

use chrono::Duration;

pub const DEFAULT_BIND_ADDR: &str = "127.0.0.1:8080";
pub const DEFAULT_CACHE_TTL_S: f64 = 5.0;
pub const DEFAULT_LIVENESS_WINDOW_S: f64 = 90.0;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub bind_addr: SocketAddr,
    /// Journal file; `None` keeps everything in memory.
    pub store_path: Option<PathBuf>,
    pub event_log_path: Option<PathBuf>,
    pub cache_ttl_s: f64,
    pub liveness_window_s: f64,
    /// Keys file; `None` installs the development keys.
    pub api_keys_file: Option<PathBuf>,
    pub replay_window: usize,
    pub subscriber_capacity: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            bind_addr: DEFAULT_BIND_ADDR.parse().unwrap(),
            store_path: None,
            event_log_path: None,
            cache_ttl_s: DEFAULT_CACHE_TTL_S,
            liveness_window_s: DEFAULT_LIVENESS_WINDOW_S,
            api_keys_file: None,
            replay_window: crate::events::DEFAULT_REPLAY_WINDOW,
            subscriber_capacity: crate::events::DEFAULT_SUBSCRIBER_CAPACITY,
        }
    }
}

fn seconds(name: &str, raw: &str) -> Result<f64, String> {
    match raw.trim().parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
        _ => Err(format!("{name} must be a non-negative number of seconds, got '{raw}'")),
    }
}

impl ServerConfig {
    /// Reads `VQPU_*` variables through `get`, falling back to defaults.
    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, String> {
        let mut c = Self::default();
        if let Some(v) = get("VQPU_BIND_ADDR") {
            c.bind_addr = v.parse().map_err(|e| format!("VQPU_BIND_ADDR '{v}': {e}"))?;
        }
        c.store_path = Some(get("VQPU_STORE_PATH").unwrap_or_else(|| "vqpu-data/store.jsonl".into()).into());
        c.event_log_path = Some(get("VQPU_EVENT_LOG_PATH").unwrap_or_else(|| "vqpu-data/events.jsonl".into()).into());
        if let Some(v) = get("VQPU_CACHE_TTL_S") {
            c.cache_ttl_s = seconds("VQPU_CACHE_TTL_S", &v)?;
        }
        if let Some(v) = get("VQPU_LIVENESS_WINDOW_S") {
            c.liveness_window_s = seconds("VQPU_LIVENESS_WINDOW_S", &v)?;
        }
        c.api_keys_file = get("VQPU_API_KEYS_FILE").map(PathBuf::from);
        Ok(c)
    }

    pub fn from_env() -> Result<Self, String> {
        Self::from_lookup(|k| std::env::var(k).ok().filter(|v| !v.is_empty()))
    }

    pub fn cache_ttl(&self) -> Duration {
        Duration::milliseconds((self.cache_ttl_s * 1000.0).round() as i64)
    }

    pub fn liveness_window(&self) -> Duration {
        Duration::milliseconds((self.liveness_window_s * 1000.0).round() as i64)
    }
}
