//! Reward execution: sandbox timeouts, worker pools and the judge-model
//! offload timing.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::workload::Task;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RewardKind {
    Rule,
    Sandbox,
    Judge,
}

impl From<Task> for RewardKind {
    fn from(t: Task) -> Self {
        match t {
            Task::Math => RewardKind::Rule,
            Task::Code => RewardKind::Sandbox,
            Task::Judge => RewardKind::Judge,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Pass,
    Fail,
    TimeoutZero,
}

impl Outcome {
    pub fn reward(self) -> f64 {
        match self {
            Outcome::Pass => 1.0,
            Outcome::Fail | Outcome::TimeoutZero => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeoutConfig {
    pub lambda: f64,
    pub t_min: f64,
    pub t_max: f64,
    /// When false every test case gets `t_max`.
    pub adaptive: bool,
}

impl Default for TimeoutConfig {
    fn default() -> Self {
        Self {
            lambda: 1.5,
            t_min: 2.0,
            t_max: 30.0,
            adaptive: true,
        }
    }
}

/// Sandbox budgets per test case, anchored on the slowest passing run seen.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeoutPolicy {
    pub cfg: TimeoutConfig,
    anchors: HashMap<u32, f64>,
}

impl TimeoutPolicy {
    pub fn new(cfg: TimeoutConfig) -> Self {
        Self {
            cfg,
            anchors: HashMap::new(),
        }
    }

    pub fn anchor(&self, case: u32) -> Option<f64> {
        self.anchors.get(&case).copied()
    }

    pub fn set_anchor(&mut self, case: u32, t: f64) {
        self.anchors.insert(case, t);
    }

    pub fn compute_timeout(&self, case: u32) -> f64 {
        let c = &self.cfg;
        match self.anchor(case) {
            Some(a) if c.adaptive => (c.lambda * a).max(c.t_min).min(c.t_max),
            _ => c.t_max,
        }
    }

    /// Only passing runs move the anchor, and only upwards.
    pub fn record(&mut self, case: u32, outcome: Outcome, elapsed: f64) {
        if outcome == Outcome::Pass {
            let a = self.anchors.entry(case).or_insert(elapsed);
            *a = a.max(elapsed);
        }
    }

    /// Run one sandbox execution to completion under the current budget.
    pub fn run_sandbox(&mut self, case: u32, exec_time: f64, correct: bool) -> (Outcome, f64) {
        let budget = self.compute_timeout(case);
        let (outcome, elapsed) = settle_sandbox(exec_time, correct, budget);
        self.record(case, outcome, elapsed);
        (outcome, elapsed)
    }
}

/// Outcome of an execution that needs `exec_time` under `budget`.
pub fn settle_sandbox(exec_time: f64, correct: bool, budget: f64) -> (Outcome, f64) {
    if exec_time <= budget {
        (if correct { Outcome::Pass } else { Outcome::Fail }, exec_time)
    } else {
        (Outcome::TimeoutZero, budget)
    }
}

/// Colocated judge model whose layers are partly streamed over PCIe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JudgeModel {
    pub num_layers: u32,
    pub layer_gib: f64,
    pub pcie_gib_s: f64,
    /// Forward time of one layer per input token.
    pub secs_per_token_layer: f64,
    pub activation_mib_per_token: f64,
    /// Decode throughput multiplier of the hosting rollout instance while a
    /// judge task runs.
    pub mps_interference: f64,
    /// Per-GPU memory set aside for the judge on rollout GPUs.
    pub reserve_gib: f64,
}

impl Default for JudgeModel {
    fn default() -> Self {
        Self {
            num_layers: 28,
            layer_gib: 0.5,
            pcie_gib_s: 12.0,
            secs_per_token_layer: 1.25e-6,
            activation_mib_per_token: 0.06,
            mps_interference: 0.95,
            reserve_gib: 6.0,
        }
    }
}

impl JudgeModel {
    pub fn validate(&self) -> Result<()> {
        let ok = self.num_layers > 0
            && self.layer_gib > 0.0
            && self.pcie_gib_s > 0.0
            && self.secs_per_token_layer >= 0.0
            && self.activation_mib_per_token >= 0.0
            && self.mps_interference > 0.0
            && self.mps_interference <= 1.0
            && self.reserve_gib >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(SimError::InvalidScenario("judge model parameters out of range".into()))
        }
    }

    pub fn per_layer_compute(&self, seq_len: u32) -> f64 {
        self.secs_per_token_layer * f64::from(seq_len)
    }

    pub fn layer_transfer(&self) -> f64 {
        self.layer_gib / self.pcie_gib_s
    }

    pub fn activation_gib(&self, seq_len: u32) -> f64 {
        f64::from(seq_len) * self.activation_mib_per_token / 1024.0
    }

    /// Latency with each offloaded layer's transfer overlapped with compute.
    pub fn judge_latency(&self, resident: u32, seq_len: u32) -> f64 {
        let resident = resident.min(self.num_layers);
        let c = self.per_layer_compute(seq_len);
        let offloaded = self.num_layers - resident;
        f64::from(resident) * c + f64::from(offloaded) * c.max(self.layer_transfer())
    }

    /// Latency when all transfers complete before compute starts.
    pub fn non_pipelined_latency(&self, resident: u32, seq_len: u32) -> f64 {
        let offloaded = self.num_layers - resident.min(self.num_layers);
        f64::from(offloaded) * self.layer_transfer() + f64::from(self.num_layers) * self.per_layer_compute(seq_len)
    }

    /// Most layers that stay resident next to the activations of `seq_len`.
    pub fn plan_offload(&self, seq_len: u32, free_gib: f64) -> Result<u32> {
        let act = self.activation_gib(seq_len);
        if act > free_gib {
            return Err(SimError::JudgeInfeasible {
                needed_gib: act,
                free_gib,
            });
        }
        let k = ((free_gib - act) / self.layer_gib + 1e-9).floor() as u32;
        Ok(k.min(self.num_layers))
    }
}

/// A fixed-size worker pool with FIFO overflow; `None` capacity is unlimited.
#[derive(Debug, Clone, Default)]
pub struct WorkerPool {
    pub capacity: Option<usize>,
    pub busy: usize,
    pub queue: VecDeque<u32>,
}

impl WorkerPool {
    pub fn new(capacity: Option<usize>) -> Self {
        Self {
            capacity,
            busy: 0,
            queue: VecDeque::new(),
        }
    }

    /// Claim a worker for `task`, or queue it. Returns true if it starts now.
    pub fn submit(&mut self, task: u32) -> bool {
        if self.capacity.is_none_or(|c| self.busy < c) {
            self.busy += 1;
            true
        } else {
            self.queue.push_back(task);
            false
        }
    }

    /// Free a worker; returns the next queued task, which takes the worker.
    pub fn release(&mut self) -> Option<u32> {
        debug_assert!(self.busy > 0);
        match self.queue.pop_front() {
            Some(t) => Some(t),
            None => {
                self.busy -= 1;
                None
            }
        }
    }
}
