//! Discrete-event engine for one synchronous RL training job.
//!
//! Each step runs rollout, reward and training against a shared virtual
//! clock and ends with a weight sync; the next step's rollout starts only
//! after that sync.

mod engine;
mod queue;

pub(crate) use engine::{population, reward_draw, starting_tp, LengthSource};
pub use engine::{run, run_detailed, RunOutput, ScaleEvent, StepGradient, TraceEntry};
pub use queue::{EventKind, EventQueue, SimEvent, SimTime};
