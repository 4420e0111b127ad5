//! Tail batching: speculative short rounds, the long-prompt queue, and
//! non-speculative long rounds.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cluster::{Admission, Cluster, RequestId};
use crate::error::{Result, SimError};
use crate::workload::{EpochState, PromptId, PromptRecord, PromptSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoundKind {
    Short,
    Long,
    Baseline,
}

impl fmt::Display for RoundKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RoundKind::Short => "short",
            RoundKind::Long => "long",
            RoundKind::Baseline => "baseline",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutConfig {
    pub tail_batching: bool,
    pub spec_factor: f64,
    pub prompts_per_step: usize,
    pub responses_per_prompt: usize,
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.spec_factor >= 1.0) || !self.spec_factor.is_finite() {
            return Err(SimError::InvalidScenario(format!(
                "η ≥ 1 required (spec_factor = {})",
                self.spec_factor
            )));
        }
        if self.prompts_per_step == 0 || self.responses_per_prompt == 0 {
            return Err(SimError::InvalidScenario(
                "prompts_per_step and responses_per_prompt must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn speculative_prompts(&self) -> usize {
        speculate(self.spec_factor, self.prompts_per_step)
    }

    pub fn speculative_responses(&self) -> usize {
        speculate(self.spec_factor, self.responses_per_prompt)
    }
}

fn speculate(eta: f64, n: usize) -> usize {
    // Guard against 1.25 * 128 landing a hair above 160.
    let x = eta * n as f64;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundPlan {
    pub kind: RoundKind,
    pub launched_prompts: usize,
    pub responses_per_prompt: usize,
    pub retain_prompts: usize,
    pub retain_responses: usize,
}

/// Deferred prompts awaiting a long round, each tagged with the epoch it was
/// drawn in.
#[derive(Debug, Clone, Default)]
pub struct LongPromptQueue {
    items: VecDeque<(PromptRecord, u32)>,
}

impl LongPromptQueue {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn contains(&self, id: PromptId) -> bool {
        self.items.iter().any(|(p, _)| p.id == id)
    }

    pub fn push(&mut self, mut prompt: PromptRecord, epoch: u32) {
        debug_assert!(!self.contains(prompt.id), "{} queued twice", prompt.id);
        prompt.state = EpochState::Deferred;
        self.items.push_back((prompt, epoch));
    }

    pub fn take(&mut self, n: usize) -> Vec<(PromptRecord, u32)> {
        let n = n.min(self.items.len());
        self.items.drain(..n).collect()
    }
}

/// Decide the next round's shape from queue depth and fresh prompts left in
/// the epoch. Returns `None` when the epoch is exhausted.
pub fn plan_round(queue: &LongPromptQueue, fresh_available: usize, cfg: &RolloutConfig) -> Option<RoundPlan> {
    let p0 = cfg.prompts_per_step;
    let r0 = cfg.responses_per_prompt;
    if !cfg.tail_batching {
        return (fresh_available > 0).then(|| {
            let n = fresh_available.min(p0);
            RoundPlan {
                kind: RoundKind::Baseline,
                launched_prompts: n,
                responses_per_prompt: r0,
                retain_prompts: n,
                retain_responses: r0,
            }
        });
    }
    let long = |n: usize| RoundPlan {
        kind: RoundKind::Long,
        launched_prompts: n,
        responses_per_prompt: r0,
        retain_prompts: n,
        retain_responses: r0,
    };
    if queue.len() >= p0 {
        return Some(long(p0));
    }
    if fresh_available > 0 {
        let launched = cfg.speculative_prompts().min(fresh_available);
        return Some(RoundPlan {
            kind: RoundKind::Short,
            launched_prompts: launched,
            responses_per_prompt: cfg.speculative_responses(),
            retain_prompts: p0.min(launched),
            retain_responses: r0,
        });
    }
    // End of epoch: drain whatever is left in an underfilled long round.
    (!queue.is_empty()).then(|| long(queue.len()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptProgress {
    pub prompt_id: PromptId,
    pub completed_responses: usize,
    pub in_flight: Vec<RequestId>,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResponseOutcome {
    pub retained: bool,
    /// Slot of the prompt this completion got accepted.
    pub accepted: Option<usize>,
    pub abort: Vec<RequestId>,
    pub round_complete: bool,
}

/// Bookkeeping for one rollout round.
#[derive(Debug, Clone)]
pub struct RoundState {
    pub plan: RoundPlan,
    pub prompts: Vec<PromptRecord>,
    /// Epoch each prompt was drawn in.
    pub epochs: Vec<u32>,
    pub progress: Vec<PromptProgress>,
    /// Retained completions in completion order (may include responses of
    /// prompts that end up deferred; see [`RoundState::batch`]).
    pub retained: Vec<RequestId>,
    pub accepted_order: Vec<usize>,
    pub complete: bool,
}

impl RoundState {
    pub fn new(plan: RoundPlan, prompts: Vec<(PromptRecord, u32)>) -> Self {
        debug_assert_eq!(prompts.len(), plan.launched_prompts);
        let rpp = plan.responses_per_prompt;
        let progress = prompts
            .iter()
            .enumerate()
            .map(|(slot, (p, _))| PromptProgress {
                prompt_id: p.id,
                completed_responses: 0,
                in_flight: (0..rpp).map(|k| RequestId((slot * rpp + k) as u32)).collect(),
                accepted: false,
            })
            .collect();
        let (prompts, epochs) = prompts.into_iter().unzip();
        Self {
            plan,
            prompts,
            epochs,
            progress,
            retained: Vec::new(),
            accepted_order: Vec::new(),
            complete: false,
        }
    }

    pub fn num_requests(&self) -> usize {
        self.plan.launched_prompts * self.plan.responses_per_prompt
    }

    /// Prompt slot and response index of a request.
    pub fn locate(&self, id: RequestId) -> (usize, usize) {
        let rpp = self.plan.responses_per_prompt;
        (id.0 as usize / rpp, id.0 as usize % rpp)
    }

    pub fn is_speculative(&self) -> bool {
        self.plan.kind == RoundKind::Short
    }

    pub fn on_response_complete(&mut self, id: RequestId) -> ResponseOutcome {
        let (slot, _) = self.locate(id);
        let mut out = ResponseOutcome::default();
        let pr = &mut self.progress[slot];
        pr.in_flight.retain(|&r| r != id);
        if self.complete || pr.accepted {
            return out;
        }
        pr.completed_responses += 1;
        out.retained = true;
        self.retained.push(id);
        if pr.completed_responses < self.plan.retain_responses {
            return out;
        }
        pr.accepted = true;
        out.accepted = Some(slot);
        out.abort = std::mem::take(&mut pr.in_flight);
        self.accepted_order.push(slot);
        if self.accepted_order.len() == self.plan.retain_prompts {
            self.complete = true;
            out.round_complete = true;
            for p in self.progress.iter_mut().filter(|p| !p.accepted) {
                out.abort.append(&mut p.in_flight);
            }
        }
        out
    }

    pub fn is_accepted(&self, id: RequestId) -> bool {
        self.progress[self.locate(id).0].accepted
    }

    /// Training batch: retained responses of accepted prompts.
    pub fn batch(&self) -> Vec<RequestId> {
        self.retained.iter().copied().filter(|&r| self.is_accepted(r)).collect()
    }

    /// Slots of prompts that were launched but not accepted.
    pub fn unaccepted(&self) -> Vec<usize> {
        (0..self.progress.len()).filter(|&s| !self.progress[s].accepted).collect()
    }
}

/// Per-epoch record of drawn and trained prompts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpochLog {
    pub drawn: Vec<PromptId>,
    pub trained: Vec<PromptId>,
}

/// Round planning across steps: owns the long-prompt queue and the epoch log.
#[derive(Debug, Clone)]
pub struct RolloutScheduler {
    pub cfg: RolloutConfig,
    pub queue: LongPromptQueue,
    pub epochs: Vec<EpochLog>,
}

impl RolloutScheduler {
    pub fn new(cfg: RolloutConfig) -> Self {
        Self {
            cfg,
            queue: LongPromptQueue::default(),
            epochs: vec![EpochLog::default()],
        }
    }

    pub fn next_round(&mut self, source: &mut PromptSource) -> Result<RoundState> {
        let plan = match plan_round(&self.queue, source.remaining(), &self.cfg) {
            Some(p) => p,
            None => {
                source.next_epoch();
                self.epochs.push(EpochLog::default());
                plan_round(&self.queue, source.remaining(), &self.cfg)
                    .ok_or_else(|| SimError::InvalidScenario("prompt population is empty".into()))?
            }
        };
        let prompts = match plan.kind {
            RoundKind::Long => self.queue.take(plan.launched_prompts),
            RoundKind::Short | RoundKind::Baseline => {
                let epoch = source.epoch();
                let drawn = source.draw(plan.launched_prompts);
                let log = &mut self.epochs[epoch as usize];
                log.drawn.extend(drawn.iter().map(|p| p.id));
                drawn.into_iter().map(|p| (p, epoch)).collect()
            }
        };
        Ok(RoundState::new(plan, prompts))
    }

    /// Record trained prompts and defer the rest. Returns the deferral count.
    pub fn finish_round(&mut self, round: &RoundState) -> usize {
        let mut deferred = 0;
        for (slot, p) in round.prompts.iter().enumerate() {
            let epoch = round.epochs[slot];
            if round.progress[slot].accepted {
                self.epochs[epoch as usize].trained.push(p.id);
            } else {
                debug_assert_eq!(round.plan.kind, RoundKind::Short);
                self.queue.push(p.clone(), epoch);
                deferred += 1;
            }
        }
        deferred
    }
}

/// Assign each request to the active instance with the least projected KV
/// load (admitted tokens plus queued prompt tokens); ties go to the lowest
/// index.
pub fn dispatch(cluster: &mut Cluster, ids: &[RequestId]) -> Vec<(RequestId, usize, Admission)> {
    let mut load: Vec<Option<u64>> = cluster
        .instances
        .iter()
        .map(|inst| {
            inst.active.then(|| {
                let queued: u64 = inst
                    .waiting
                    .iter()
                    .chain(inst.preempted.iter())
                    .map(|&r| cluster.request(r).kv_tokens())
                    .sum();
                inst.kv_used + queued
            })
        })
        .collect();
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let mut best: Option<(usize, u64)> = None;
        for (i, l) in load.iter().enumerate() {
            if let Some(l) = *l {
                if best.is_none_or(|(_, b)| l < b) {
                    best = Some((i, l));
                }
            }
        }
        let (idx, _) = best.expect("dispatch needs at least one active instance");
        let adm = cluster.admit(idx, id);
        load[idx] = Some(load[idx].unwrap() + cluster.request(id).kv_tokens());
        out.push((id, idx, adm));
    }
    out
}
