//! The execution-plane agent.
//!
//! It only ever opens outbound connections to the control plane, claims
//! work, materialises run directories, submits runner jobs through a
//! [`BatchScheduler`](scheduler::BatchScheduler) and reports what the
//! artifacts say.

pub mod agent;
pub mod client;
pub mod config;
pub mod scheduler;

use std::sync::Arc;

use vqpu_core::clock::SystemClock;

pub use agent::{Agent, AgentStats, Backoff, StopHandle};
pub use config::{AgentConfig, BackendConfig, DelaySpec, Fault, FaultPlan, Injection};
pub use scheduler::{
    BatchScheduler, ExitClass, InProcessExecutor, JobStatus, LocalScheduler, ProcessExecutor, RenderedJob,
    SimulatedScheduler, TerminalRecord,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;

/// The wall-clock, process-spawning backend named by `config`.
pub fn build_scheduler(config: &AgentConfig) -> Arc<dyn BatchScheduler> {
    match &config.backend {
        BackendConfig::Local => Arc::new(LocalScheduler::new(config.max_slots)),
        BackendConfig::Simulated(plan) => {
            Arc::new(SimulatedScheduler::new(plan.clone(), Arc::new(SystemClock), Arc::new(ProcessExecutor)))
        }
    }
}

/// Loads the configuration named by `VQPU_AGENT_CONFIG` and builds an agent,
/// or returns the exit code for a configuration error.
pub fn from_env() -> Result<Arc<Agent>, i32> {
    let config = AgentConfig::from_env().map_err(|e| {
        eprintln!("configuration error: {e}");
        EXIT_CONFIG
    })?;
    if let Err(e) = std::fs::create_dir_all(&config.work_dir) {
        eprintln!("configuration error: cannot create work_dir {}: {e}", config.work_dir.display());
        return Err(EXIT_CONFIG);
    }
    let scheduler = build_scheduler(&config);
    Agent::new(config, scheduler).map_err(|e| {
        eprintln!("configuration error: {e}");
        EXIT_CONFIG
    })
}
