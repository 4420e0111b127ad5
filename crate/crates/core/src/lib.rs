//! Deterministic discrete-event simulator of synchronous RL post-training:
//! tail-batched rollout, preemption-driven TP planning, overlapped rewards
//! and a streaming trainer, plus a plain synchronous reference loop.

pub mod cluster;
pub mod error;
pub mod matrix;
pub mod metrics;
pub mod oracle;
pub mod planner;
pub mod reward;
pub mod rng;
pub mod rollout;
pub mod scenario;
pub mod sim;
pub mod trainer;
pub mod workload;

pub use error::{Result, SimError};
pub use metrics::StepReport;
pub use scenario::{Scenario, Toggles};
pub use sim::{run, run_detailed};
