pub mod adaptive;
pub mod agent;
pub mod config;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod pipeline;
pub mod pool;
pub mod refinement;
pub mod router;
pub mod service;
pub mod synthetic;
pub mod workspace;

pub use agent::AgentId;
pub use error::{Error, Result};
