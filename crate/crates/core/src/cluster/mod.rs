//! GPUs, TP-grouped rollout instances, KV-cache accounting and preemption.

mod profile;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

pub use profile::{ProfilePoint, SyntheticProfile, ThroughputProfile};

use crate::error::{Result, SimError};
use crate::workload::PromptId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelSize {
    #[serde(rename = "7b")]
    B7,
    #[serde(rename = "14b")]
    B14,
    #[serde(rename = "32b")]
    B32,
}

impl ModelSize {
    /// bf16 weight footprint.
    pub fn weights_gib(self) -> f64 {
        match self {
            ModelSize::B7 => 14.2,
            ModelSize::B14 => 27.5,
            ModelSize::B32 => 61.0,
        }
    }

    /// K+V bytes per token across all layers, bf16.
    pub fn kv_mib_per_token(self) -> f64 {
        match self {
            // layers * kv_heads * head_dim * 2 (K,V) * 2 bytes
            ModelSize::B7 => 28.0 * 4.0 * 128.0 * 4.0 / 1_048_576.0,
            ModelSize::B14 => 48.0 * 8.0 * 128.0 * 4.0 / 1_048_576.0,
            ModelSize::B32 => 64.0 * 8.0 * 128.0 * 4.0 / 1_048_576.0,
        }
    }

    pub fn synthetic_profile(self) -> SyntheticProfile {
        let (single, prefill, knee) = match self {
            ModelSize::B7 => (90.0, 40_000.0, 96.0),
            ModelSize::B14 => (50.0, 20_000.0, 64.0),
            ModelSize::B32 => (25.0, 9_000.0, 32.0),
        };
        SyntheticProfile {
            single_stream_tps: single,
            prefill_tps_per_gpu: prefill,
            knee_per_gpu: knee,
            ..SyntheticProfile::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub num_nodes: u32,
    pub gpus_per_node: u32,
    pub gpu_mem_gib: f64,
    /// Fraction of device memory the serving engine may use.
    pub mem_utilization: f64,
    pub pcie_gib_s: f64,
    pub model: ModelSize,
    pub weights_gib: f64,
    pub kv_mib_per_token: f64,
    /// Fixed cost charged whenever the rollout TP size changes.
    pub reconfig_cost: f64,
}

impl ClusterSpec {
    pub fn new(num_nodes: u32, gpus_per_node: u32, model: ModelSize) -> Self {
        Self {
            num_nodes,
            gpus_per_node,
            gpu_mem_gib: 80.0,
            mem_utilization: 0.9,
            pcie_gib_s: 12.0,
            model,
            weights_gib: model.weights_gib(),
            kv_mib_per_token: model.kv_mib_per_token(),
            reconfig_cost: 5.0,
        }
    }

    pub fn total_gpus(&self) -> u32 {
        self.num_nodes * self.gpus_per_node
    }

    /// KV tokens one instance of `tp` GPUs can hold after weights and a
    /// per-GPU `reserve_gib` (judge colocation) are set aside.
    pub fn kv_capacity(&self, tp: u32, reserve_gib: f64) -> u64 {
        let usable = f64::from(tp) * (self.gpu_mem_gib * self.mem_utilization - reserve_gib) - self.weights_gib;
        if usable <= 0.0 {
            return 0;
        }
        (usable * 1024.0 / self.kv_mib_per_token).floor() as u64
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_nodes == 0 || !self.gpus_per_node.is_power_of_two() {
            return Err(SimError::InvalidScenario(
                "gpus_per_node must be a power of two and num_nodes >= 1".into(),
            ));
        }
        if self.gpu_mem_gib <= 0.0 || !(0.0..=1.0).contains(&self.mem_utilization) || self.mem_utilization == 0.0 {
            return Err(SimError::InvalidScenario("gpu memory parameters out of range".into()));
        }
        if self.weights_gib / f64::from(self.gpus_per_node) >= self.gpu_mem_gib {
            return Err(SimError::InvalidScenario(
                "model weights exceed GPU memory even at maximum TP".into(),
            ));
        }
        if self.kv_mib_per_token <= 0.0 || self.pcie_gib_s <= 0.0 || self.reconfig_cost < 0.0 {
            return Err(SimError::InvalidScenario("cluster coefficients must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RequestId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RequestState {
    Prefill,
    Decoding,
    Preempted,
    Aborted,
    Complete,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub id: RequestId,
    pub prompt: PromptId,
    pub prompt_len: u32,
    /// Hidden final length; the scheduler never reads it.
    pub true_len: u32,
    pub generated: u32,
    /// Accumulated fractional progress not yet converted into tokens.
    pub carry: f64,
    pub state: RequestState,
    pub instance: Option<usize>,
}

impl Request {
    pub fn new(id: RequestId, prompt: PromptId, prompt_len: u32, true_len: u32) -> Self {
        Self {
            id,
            prompt,
            prompt_len,
            true_len,
            generated: 0,
            carry: 0.0,
            state: RequestState::Prefill,
            instance: None,
        }
    }

    pub fn kv_tokens(&self) -> u64 {
        u64::from(self.prompt_len) + u64::from(self.generated)
    }

    pub fn is_in_flight(&self) -> bool {
        matches!(
            self.state,
            RequestState::Prefill | RequestState::Decoding | RequestState::Preempted
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutInstance {
    pub id: usize,
    pub tp: u32,
    pub node: u32,
    pub gpu_ids: Vec<u32>,
    /// Admitted requests, oldest admission first.
    pub running: Vec<RequestId>,
    pub waiting: VecDeque<RequestId>,
    pub preempted: VecDeque<RequestId>,
    pub kv_used: u64,
    pub kv_capacity: u64,
    /// Seconds of prefill/recompute still blocking decode.
    pub stall: f64,
    /// Multiplier on decode throughput (MPS interference).
    pub throughput_scale: f64,
    /// False once the instance has been handed to training.
    pub active: bool,
}

impl RolloutInstance {
    pub fn has_work(&self) -> bool {
        !(self.running.is_empty() && self.waiting.is_empty() && self.preempted.is_empty())
    }

    pub fn in_flight(&self) -> usize {
        self.running.len() + self.waiting.len() + self.preempted.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Admitted,
    Queued,
}

/// A request reaching its final token during a decode interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Completion {
    pub request: RequestId,
    pub time: f64,
}

/// The rollout fleet of one run. Owns every request of the current round.
#[derive(Debug, Clone)]
pub struct Cluster {
    pub spec: ClusterSpec,
    profile: ThroughputProfile,
    tp: u32,
    reserve_gib: f64,
    pub instances: Vec<RolloutInstance>,
    pub requests: Vec<Request>,
    preemptions: u64,
}

impl Cluster {
    pub fn new(spec: ClusterSpec, profile: ThroughputProfile, tp: u32, reserve_gib: f64) -> Result<Self> {
        spec.validate()?;
        let mut c = Self {
            spec,
            profile,
            tp: 0,
            reserve_gib,
            instances: Vec::new(),
            requests: Vec::new(),
            preemptions: 0,
        };
        c.build(tp)?;
        Ok(c)
    }

    fn build(&mut self, tp: u32) -> Result<()> {
        if tp > self.spec.gpus_per_node {
            return Err(SimError::TpTooLarge {
                tp,
                gpus_per_node: self.spec.gpus_per_node,
            });
        }
        if tp == 0 || !tp.is_power_of_two() {
            return Err(SimError::InvalidScenario(format!("tp {tp} must be a power of two")));
        }
        if !self.profile.has_tp(tp) {
            return Err(SimError::InvalidScenario(format!("throughput profile has no tp={tp} row")));
        }
        let capacity = self.spec.kv_capacity(tp, self.reserve_gib);
        if capacity == 0 {
            return Err(SimError::InvalidScenario(format!(
                "no KV capacity left at tp={tp} after weights"
            )));
        }
        let per_node = self.spec.gpus_per_node / tp;
        self.instances = (0..self.spec.num_nodes * per_node)
            .map(|i| {
                let node = i / per_node;
                let first = node * self.spec.gpus_per_node + (i % per_node) * tp;
                RolloutInstance {
                    id: i as usize,
                    tp,
                    node,
                    gpu_ids: (first..first + tp).collect(),
                    running: Vec::new(),
                    waiting: VecDeque::new(),
                    preempted: VecDeque::new(),
                    kv_used: 0,
                    kv_capacity: capacity,
                    stall: 0.0,
                    throughput_scale: 1.0,
                    active: true,
                }
            })
            .collect();
        self.tp = tp;
        Ok(())
    }

    pub fn tp(&self) -> u32 {
        self.tp
    }

    pub fn profile(&self) -> &ThroughputProfile {
        &self.profile
    }

    pub fn reserve_gib(&self) -> f64 {
        self.reserve_gib
    }

    /// Rebuild all instances at `new_tp`; returns the reconfiguration cost.
    /// Only valid between rounds.
    pub fn reconfigure_tp(&mut self, new_tp: u32) -> Result<f64> {
        if new_tp > self.spec.gpus_per_node {
            return Err(SimError::TpTooLarge {
                tp: new_tp,
                gpus_per_node: self.spec.gpus_per_node,
            });
        }
        debug_assert!(self.instances.iter().all(|i| !i.has_work()));
        if new_tp == self.tp {
            self.reset_instances();
            return Ok(0.0);
        }
        self.build(new_tp)?;
        Ok(self.spec.reconfig_cost)
    }

    /// Reactivate every instance and clear per-round state.
    pub fn reset_instances(&mut self) {
        for inst in &mut self.instances {
            inst.running.clear();
            inst.waiting.clear();
            inst.preempted.clear();
            inst.kv_used = 0;
            inst.stall = 0.0;
            inst.throughput_scale = 1.0;
            inst.active = true;
        }
    }

    /// Start a new round with a fresh request set.
    pub fn load_requests(&mut self, requests: Vec<Request>) {
        debug_assert!(requests.iter().enumerate().all(|(i, r)| r.id.0 as usize == i));
        self.reset_instances();
        self.requests = requests;
        self.preemptions = 0;
    }

    pub fn request(&self, id: RequestId) -> &Request {
        &self.requests[id.0 as usize]
    }

    pub fn preemptions(&self) -> u64 {
        self.preemptions
    }

    pub fn active_instances(&self) -> impl Iterator<Item = &RolloutInstance> {
        self.instances.iter().filter(|i| i.active)
    }

    pub fn decode_rate(&self, idx: usize) -> f64 {
        let inst = &self.instances[idx];
        let n = inst.running.len();
        if n == 0 {
            return 0.0;
        }
        self.profile.decode_tps(inst.tp, n) * inst.throughput_scale / n as f64
    }

    pub fn prefill_rate(&self, idx: usize) -> f64 {
        let inst = &self.instances[idx];
        self.profile.prefill_tps(inst.tp, inst.running.len().max(1))
    }

    /// Place `req` on instance `idx`: admit if its prompt fits, else queue FIFO.
    pub fn admit(&mut self, idx: usize, req: RequestId) -> Admission {
        let prompt = u64::from(self.requests[req.0 as usize].prompt_len);
        let inst = &self.instances[idx];
        let fits = inst.waiting.is_empty()
            && inst.preempted.is_empty()
            && inst.kv_used + prompt <= inst.kv_capacity;
        self.requests[req.0 as usize].instance = Some(idx);
        if fits {
            self.start(idx, req, prompt);
            Admission::Admitted
        } else {
            self.instances[idx].waiting.push_back(req);
            Admission::Queued
        }
    }

    /// Move `req` into the running set, charging prefill of `tokens`.
    fn start(&mut self, idx: usize, req: RequestId, tokens: u64) {
        let rate = self.profile.prefill_tps(self.instances[idx].tp, self.instances[idx].running.len() + 1);
        let r = &mut self.requests[req.0 as usize];
        r.state = RequestState::Decoding;
        r.instance = Some(idx);
        let kv = r.kv_tokens();
        let inst = &mut self.instances[idx];
        inst.kv_used += kv;
        inst.running.push(req);
        inst.stall += tokens as f64 / rate;
    }

    /// Re-admit the oldest preempted request if it fits, paying recompute of
    /// its prompt plus generated tokens. Returns the recompute time charged.
    pub fn resume_preempted(&mut self, idx: usize) -> Option<f64> {
        let &req = self.instances[idx].preempted.front()?;
        let need = self.requests[req.0 as usize].kv_tokens();
        let inst = &self.instances[idx];
        if inst.kv_used + need > inst.kv_capacity {
            return None;
        }
        self.instances[idx].preempted.pop_front();
        let before = self.instances[idx].stall;
        self.start(idx, req, need);
        Some(self.instances[idx].stall - before)
    }

    /// Admit queued work while memory allows: preempted requests first, then
    /// new arrivals in FIFO order.
    pub fn fill(&mut self, idx: usize) {
        while self.resume_preempted(idx).is_some() {}
        if !self.instances[idx].preempted.is_empty() {
            return;
        }
        while let Some(&req) = self.instances[idx].waiting.front() {
            let prompt = u64::from(self.requests[req.0 as usize].prompt_len);
            let inst = &self.instances[idx];
            if inst.kv_used + prompt > inst.kv_capacity {
                break;
            }
            self.instances[idx].waiting.pop_front();
            self.start(idx, req, prompt);
        }
    }

    /// Advance decoding on instance `idx` over `[t0, t0 + dt]`. Requests that
    /// reach their final token complete, release their KV and are reported
    /// with their exact in-interval completion time.
    pub fn advance_decode(&mut self, idx: usize, t0: f64, dt: f64) -> Vec<Completion> {
        debug_assert!(dt > 0.0);
        let inst = &mut self.instances[idx];
        if inst.running.is_empty() {
            inst.stall = (inst.stall - dt).max(0.0);
            return Vec::new();
        }
        let stall_used = inst.stall.min(dt);
        inst.stall -= stall_used;
        let window = dt - stall_used;
        if window <= 0.0 {
            return Vec::new();
        }
        let n = inst.running.len();
        let rate = self.profile.decode_tps(inst.tp, n) * inst.throughput_scale / n as f64;
        let gain = rate * window;
        let start = t0 + stall_used;
        let mut done = Vec::new();
        let mut added = 0u64;
        let mut released = 0u64;
        for &id in &inst.running {
            let r = &mut self.requests[id.0 as usize];
            let remaining = f64::from(r.true_len - r.generated);
            let before = r.carry;
            r.carry += gain;
            if r.carry >= remaining {
                let time = start + (remaining - before) / rate;
                added += u64::from(r.true_len - r.generated);
                released += u64::from(r.prompt_len) + u64::from(r.true_len);
                r.generated = r.true_len;
                r.carry = 0.0;
                r.state = RequestState::Complete;
                done.push(Completion { request: id, time });
            } else {
                let tokens = r.carry.floor();
                r.carry -= tokens;
                r.generated += tokens as u32;
                added += tokens as u64;
            }
        }
        inst.kv_used = inst.kv_used + added - released;
        if !done.is_empty() {
            let reqs = &self.requests;
            inst.running.retain(|id| reqs[id.0 as usize].state != RequestState::Complete);
        }
        done
    }

    /// Evict the most recently admitted requests until KV fits.
    pub fn maybe_preempt(&mut self, idx: usize) -> Vec<RequestId> {
        let mut victims = Vec::new();
        while self.instances[idx].kv_used > self.instances[idx].kv_capacity {
            let Some(id) = self.instances[idx].running.pop() else {
                break;
            };
            let r = &mut self.requests[id.0 as usize];
            r.state = RequestState::Preempted;
            let kv = r.kv_tokens();
            let inst = &mut self.instances[idx];
            inst.kv_used -= kv;
            inst.preempted.push_back(id);
            victims.push(id);
        }
        self.preemptions += victims.len() as u64;
        victims
    }

    /// Drop an in-flight request and free its KV immediately.
    pub fn abort(&mut self, id: RequestId) {
        let r = &mut self.requests[id.0 as usize];
        if !r.is_in_flight() {
            return;
        }
        let was_running = r.state == RequestState::Decoding;
        let kv = r.kv_tokens();
        r.state = RequestState::Aborted;
        let Some(idx) = r.instance else { return };
        let inst = &mut self.instances[idx];
        if was_running {
            if let Some(pos) = inst.running.iter().position(|&x| x == id) {
                inst.running.remove(pos);
                inst.kv_used -= kv;
            }
        } else if let Some(pos) = inst.waiting.iter().position(|&x| x == id) {
            inst.waiting.remove(pos);
        } else if let Some(pos) = inst.preempted.iter().position(|&x| x == id) {
            inst.preempted.remove(pos);
        }
    }

    pub fn abort_all_in_flight(&mut self) -> usize {
        let mut n = 0;
        for r in &mut self.requests {
            if r.is_in_flight() {
                r.state = RequestState::Aborted;
                n += 1;
            }
        }
        for inst in &mut self.instances {
            inst.running.clear();
            inst.waiting.clear();
            inst.preempted.clear();
            inst.kv_used = 0;
            inst.stall = 0.0;
        }
        n
    }

    /// Move every request off `victims` onto the remaining active instances
    /// and deactivate the victims. Requests that held KV re-enter the receiver
    /// as preempted and are recomputed on admission; never-admitted ones join
    /// its waiting queue. Returns the number of moved requests and the largest
    /// recompute backlog added to a single receiver.
    pub fn migrate(&mut self, victims: &[usize]) -> (usize, f64) {
        let mut moved = Vec::new();
        for &v in victims {
            let inst = &mut self.instances[v];
            inst.active = false;
            moved.extend(inst.running.drain(..).map(|id| (id, true)));
            moved.extend(inst.preempted.drain(..).map(|id| (id, true)));
            moved.extend(inst.waiting.drain(..).map(|id| (id, false)));
            inst.kv_used = 0;
            inst.stall = 0.0;
            inst.throughput_scale = 1.0;
        }
        let mut load: Vec<Option<u64>> = self
            .instances
            .iter()
            .map(|inst| {
                inst.active.then(|| {
                    inst.kv_used
                        + inst
                            .waiting
                            .iter()
                            .chain(inst.preempted.iter())
                            .map(|&r| self.requests[r.0 as usize].kv_tokens())
                            .sum::<u64>()
                })
            })
            .collect();
        let mut backlog = vec![0.0; self.instances.len()];
        for &(id, had_kv) in &moved {
            let Some(idx) = (0..load.len())
                .filter(|&i| load[i].is_some())
                .min_by_key(|&i| (load[i], i))
            else {
                break;
            };
            let kv = self.requests[id.0 as usize].kv_tokens();
            let r = &mut self.requests[id.0 as usize];
            r.instance = Some(idx);
            if had_kv {
                r.state = RequestState::Preempted;
                self.instances[idx].preempted.push_back(id);
                backlog[idx] += kv as f64 / self.prefill_rate(idx);
            } else {
                self.instances[idx].waiting.push_back(id);
            }
            load[idx] = load[idx].map(|l| l + kv);
        }
        (moved.len(), backlog.into_iter().fold(0.0, f64::max))
    }

    /// Fail if any instance holds more KV than it can.
    pub fn check_memory(&self) -> Result<()> {
        for inst in &self.instances {
            if inst.kv_used > inst.kv_capacity {
                return Err(SimError::MemoryViolation {
                    instance: inst.id,
                    used: inst.kv_used,
                    capacity: inst.kv_capacity,
                });
            }
        }
        Ok(())
    }

    /// Run admission, decode and preemption on every active instance for one
    /// tick. Completions are returned in instance order.
    pub fn tick(&mut self, t0: f64, dt: f64) -> Vec<Completion> {
        let mut out = Vec::new();
        for idx in 0..self.instances.len() {
            if !self.instances[idx].active || !self.instances[idx].has_work() {
                continue;
            }
            self.fill(idx);
            out.extend(self.advance_decode(idx, t0, dt));
            self.maybe_preempt(idx);
        }
        out
    }
}
