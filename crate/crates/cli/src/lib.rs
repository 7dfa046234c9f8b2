//! Command-line client, process harness and evaluation scenarios for the
//! virtual-QPU service.

pub mod api;
pub mod audit;
pub mod cli;
pub mod experiments;
pub mod harness;

pub use api::{Api, ApiError, SseFrame};
pub use cli::{run, Cli};
