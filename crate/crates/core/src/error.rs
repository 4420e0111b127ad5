use thiserror::Error;

use crate::sim::SimTime;

pub type Result<T, E = SimError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("event scheduled in the past: t={event} < clock={clock}")]
    EventInPast { event: SimTime, clock: SimTime },

    #[error("event queue drained after {completed} of {expected} steps")]
    QueueDrained { completed: usize, expected: usize },

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("invalid length model: {0}")]
    InvalidLengthModel(String),

    #[error("trace parse error at line {line}: {msg}")]
    TraceParse { line: usize, msg: String },

    #[error("profile parse error at line {line}: {msg}")]
    ProfileParse { line: usize, msg: String },

    #[error("empty throughput profile")]
    EmptyProfile,

    #[error("tp size {tp} exceeds {gpus_per_node} GPUs per node")]
    TpTooLarge { tp: u32, gpus_per_node: u32 },

    #[error("judge model does not fit: activation needs {needed_gib:.3} GiB, {free_gib:.3} GiB free")]
    JudgeInfeasible { needed_gib: f64, free_gib: f64 },

    #[error("memory safety violated on instance {instance}: kv_used {used} > kv_capacity {capacity}")]
    MemoryViolation { instance: usize, used: u64, capacity: u64 },

    #[error("sample {0} has no reward outcome")]
    UnrewardedSample(u64),

    #[error("sample {0} consumed twice")]
    DuplicateSample(u64),

    #[error("gradient accounting mismatch: {got} samples, expected {expected}")]
    SampleCountMismatch { got: usize, expected: usize },

    #[error("empty sample set")]
    EmptySamples,

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
