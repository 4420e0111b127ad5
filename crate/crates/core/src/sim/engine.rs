use std::collections::VecDeque;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::cluster::{Cluster, Request, RequestId, RequestState};
use crate::error::{Result, SimError};
use crate::metrics::StepReport;
use crate::oracle::oracle_mean_gradient;
use crate::planner::{initial_tp, PlannerState, WorkloadSummary};
use crate::reward::{settle_sandbox, Outcome, RewardKind, TimeoutPolicy, WorkerPool};
use crate::rng::rng_for;
use crate::rollout::{dispatch, EpochLog, RolloutScheduler, RoundKind, RoundState};
use crate::scenario::{Scenario, TpChoice};
use crate::trainer::{
    meet_scale_criteria, pick_scale_down_gpus, sample_gradient, GradLedger, LengthStats, Sample, ScaleCheck,
    StreamState,
};
use crate::workload::{
    generate_population, sample_response_length, sample_reward_draw, PromptRecord, PromptSource, RewardCostModel,
    RewardDraw, Trace,
};

use super::queue::{EventKind, EventQueue, SimTime};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub time: f64,
    pub kind: EventKind,
}

/// Streamed-and-finalized gradient of one step next to the plain mean.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGradient {
    pub step: u32,
    pub finalized: Vec<f64>,
    pub oracle: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleEvent {
    pub step: u32,
    pub time: f64,
    pub fraction: f64,
    pub migrated: usize,
    pub migration_s: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub reports: Vec<StepReport>,
    pub epochs: Vec<EpochLog>,
    pub gradients: Vec<StepGradient>,
    pub scale_events: Vec<ScaleEvent>,
    /// Every popped event, when tracing was requested.
    pub trace: Vec<TraceEntry>,
    /// Final lengths of each step's training batch.
    pub batch_lengths: Vec<Vec<u32>>,
}

/// Run the scenario and return one report per step.
pub fn run(scenario: &Scenario) -> Result<Vec<StepReport>> {
    Ok(run_detailed(scenario, false)?.reports)
}

pub fn run_detailed(scenario: &Scenario, trace: bool) -> Result<RunOutput> {
    scenario.validate()?;
    let mut e = Engine::new(scenario, trace)?;
    e.run()?;
    let mut out = e.out;
    out.epochs = e.sched.epochs;
    Ok(out)
}

/// Build the prompt population: the trace when given, else generated.
pub(crate) fn population(sc: &Scenario) -> Result<(Vec<PromptRecord>, Option<Trace>)> {
    match &sc.workload.trace {
        Some(path) => {
            let t = crate::workload::load_trace(path, sc.max_cap())?;
            if t.is_empty() {
                return Err(SimError::InvalidScenario("workload.trace: trace has no prompts".into()));
            }
            Ok((t.prompts.clone(), Some(t)))
        }
        None => {
            let mut rng = rng_for("population", sc.run.seed, &[]);
            let pop = generate_population(sc.workload.dataset_size, &sc.length_model(), sc.workload.task, &mut rng)?;
            Ok((pop, None))
        }
    }
}

/// Draws the hidden response lengths of a round. Synthetic lengths are keyed
/// by (step, prompt, response index); trace lengths replay in order.
pub(crate) struct LengthSource {
    seed: u64,
    trace: Option<Trace>,
    cursor: Vec<usize>,
}

impl LengthSource {
    pub(crate) fn new(seed: u64, trace: Option<Trace>) -> Self {
        let n = trace.as_ref().map_or(0, |t| t.prompts.len());
        Self {
            seed,
            trace,
            cursor: vec![0; n],
        }
    }

    pub(crate) fn length(&mut self, sc: &Scenario, step: u32, prompt: &PromptRecord, k: usize) -> u32 {
        match &self.trace {
            Some(t) => {
                let c = &mut self.cursor[prompt.id.0 as usize];
                let len = t.length(prompt.id, *c);
                *c += 1;
                len.min(sc.cap_for_step(step))
            }
            None => {
                let model = sc.length_model_for_step(step);
                let mut rng = rng_for(
                    "response-len",
                    self.seed,
                    &[u64::from(step), u64::from(prompt.id.0), k as u64],
                );
                sample_response_length(prompt, &model, &mut rng)
            }
        }
    }
}

pub(crate) fn reward_draw(
    seed: u64,
    step: u32,
    prompt: &PromptRecord,
    k: usize,
    len: u32,
    model: &RewardCostModel,
) -> Result<RewardDraw> {
    // The prompt's share of execution time is fixed for the whole run.
    let prompt_z: f64 = rng_for("exec-latent", seed, &[u64::from(prompt.id.0)]).sample(StandardNormal);
    let mut rng = rng_for("reward", seed, &[u64::from(step), u64::from(prompt.id.0), k as u64]);
    sample_reward_draw(prompt.task, len, prompt_z, model, &mut rng)
}

/// Starting TP for the scenario.
pub(crate) fn starting_tp(sc: &Scenario, cluster_profile: &crate::cluster::ThroughputProfile) -> Result<u32> {
    match sc.cluster.tp {
        TpChoice::Fixed(tp) => Ok(tp),
        TpChoice::Auto => {
            let model = sc.length_model_for_step(0);
            let n = sc.run.prompts_per_step * sc.run.responses_per_prompt;
            let std = statrs::distribution::Normal::new(0.0, 1.0).expect("unit normal");
            let sigma = (model.sigma_prompt.powi(2) + model.sigma_response.powi(2)).sqrt();
            let lengths = (0..n)
                .map(|i| {
                    use statrs::distribution::ContinuousCDF;
                    let z = std.inverse_cdf((i as f64 + 0.5) / n as f64);
                    (model.median * model.scale * (sigma * z).exp()).min(f64::from(model.cap))
                })
                .collect();
            let w = WorkloadSummary {
                lengths,
                prompt_len: model.prompt_len_median,
            };
            initial_tp(cluster_profile, &sc.cluster.spec(), sc.judge_reserve_gib(), &w)
        }
    }
}

#[derive(Debug, Clone)]
struct RewardTask {
    request: RequestId,
    kind: RewardKind,
    case: u32,
    draw: RewardDraw,
    seq_len: u32,
    submit: f64,
    finish: Option<f64>,
    /// Verdict fixed at start, published at finish.
    verdict: Outcome,
    outcome: Option<Outcome>,
    elapsed: f64,
    host: Option<usize>,
    cancelled: bool,
}

struct StreamRound {
    state: StreamState,
    ledger: Option<GradLedger>,
    ready: VecDeque<Sample>,
    chunks: Vec<Option<Vec<Sample>>>,
    streamed: usize,
    scaled_at: Option<f64>,
    migration_s: f64,
    migrated: usize,
    victim_gpus: u32,
    /// Replicas can start once migration has finished.
    ready_at: f64,
}

struct Step {
    index: u32,
    start: f64,
    rollout_start: f64,
    reconfig_s: f64,
    tp: u32,
    cap: u32,
    round: RoundState,
    rollout_end: Option<f64>,
    preempts: u64,
    deferrals: usize,
    queue_depth: usize,
    tasks: Vec<RewardTask>,
    task_of: Vec<Option<u32>>,
    cpu: WorkerPool,
    judges: WorkerPool,
    judge_busy: Vec<bool>,
    /// Batch members whose reward is settled.
    rewarded: Vec<Option<f64>>,
    pending_rewards: usize,
    batch: Vec<RequestId>,
    stream: Option<StreamRound>,
    barrier: Option<f64>,
    finalize_s: f64,
    barrier_time: f64,
    reward_end: f64,
}

struct Engine<'a> {
    sc: &'a Scenario,
    seed: u64,
    q: EventQueue,
    cluster: Cluster,
    source: PromptSource,
    lengths: LengthSource,
    sched: RolloutScheduler,
    planner: Option<PlannerState>,
    pending_tp: Option<u32>,
    timeouts: TimeoutPolicy,
    stats: LengthStats,
    reward_model: RewardCostModel,
    step: Option<Step>,
    record: bool,
    out: RunOutput,
    synthetic: bool,
}

impl<'a> Engine<'a> {
    fn new(sc: &'a Scenario, record: bool) -> Result<Self> {
        let profile = sc.throughput_profile()?;
        let synthetic = profile.synthetic;
        let tp = starting_tp(sc, &profile)?;
        let cluster = Cluster::new(sc.cluster.spec(), profile, tp, sc.judge_reserve_gib())?;
        let (pop, trace) = population(sc)?;
        let mut timeout_cfg = sc.reward.timeout.clone();
        timeout_cfg.adaptive &= sc.run.toggles.reward_scheduler;
        Ok(Self {
            sc,
            seed: sc.run.seed,
            q: EventQueue::new(),
            cluster,
            source: PromptSource::new(pop, sc.run.seed),
            lengths: LengthSource::new(sc.run.seed, trace),
            sched: RolloutScheduler::new(sc.run.rollout()),
            planner: sc
                .run
                .toggles
                .planner
                .then(|| PlannerState::new(sc.planner.clone(), tp, sc.cluster.gpus_per_node)),
            pending_tp: None,
            timeouts: TimeoutPolicy::new(timeout_cfg),
            stats: LengthStats::default(),
            reward_model: sc.reward.cost_model(),
            step: None,
            record,
            out: RunOutput::default(),
            synthetic,
        })
    }

    fn run(&mut self) -> Result<()> {
        let steps = self.sc.run.num_steps as usize;
        if steps == 0 {
            return Ok(());
        }
        self.q.schedule(SimTime::ZERO, EventKind::StepStart { step: 0 })?;
        while let Some(ev) = self.q.pop() {
            if self.record {
                self.out.trace.push(TraceEntry {
                    time: ev.time.0,
                    kind: ev.kind,
                });
            }
            let now = ev.time.0;
            match ev.kind {
                EventKind::StepStart { step } => self.on_step_start(step, now)?,
                EventKind::DecodeTick { step } => self.on_tick(step, now)?,
                EventKind::RequestComplete { step, request } => self.on_complete(step, RequestId(request), now)?,
                EventKind::RewardDone { step, task } => self.on_reward_done(step, task, now)?,
                EventKind::MigrationDone { .. } => {}
                EventKind::TrainChunkDone { step, replica } => self.on_chunk_done(step, replica as usize, now)?,
                EventKind::StepBarrier { step } => self.on_barrier(step, now)?,
                EventKind::WeightSync { step } => self.on_weight_sync(step, now)?,
            }
            self.cluster.check_memory()?;
            if self.out.reports.len() == steps {
                return Ok(());
            }
        }
        Err(SimError::QueueDrained {
            completed: self.out.reports.len(),
            expected: steps,
        })
    }

    fn current(&mut self, step: u32) -> Option<&mut Step> {
        self.step.as_mut().filter(|s| s.index == step)
    }

    fn on_step_start(&mut self, index: u32, now: f64) -> Result<()> {
        let reconfig_s = match self.pending_tp.take() {
            Some(tp) => self.cluster.reconfigure_tp(tp)?,
            None => 0.0,
        };
        let round = self.sched.next_round(&mut self.source)?;
        let rpp = round.plan.responses_per_prompt;
        let mut requests = Vec::with_capacity(round.num_requests());
        for (slot, p) in round.prompts.iter().enumerate() {
            for k in 0..rpp {
                let len = self.lengths.length(self.sc, index, p, k);
                let id = RequestId((slot * rpp + k) as u32);
                requests.push(Request::new(id, p.id, p.prompt_len, len));
            }
        }
        let n = requests.len();
        self.cluster.load_requests(requests);
        let ids: Vec<RequestId> = (0..n as u32).map(RequestId).collect();
        dispatch(&mut self.cluster, &ids);
        let stream = (self.sc.run.toggles.stream_trainer && round.plan.kind != RoundKind::Short).then(|| StreamRound {
            state: StreamState::new(n),
            ledger: None,
            ready: VecDeque::new(),
            chunks: Vec::new(),
            streamed: 0,
            scaled_at: None,
            migration_s: 0.0,
            migrated: 0,
            victim_gpus: 0,
            ready_at: 0.0,
        });
        let judge_slots = if self.sc.colocated_judge() {
            Some(self.cluster.instances.len())
        } else {
            Some(self.sc.reward.dedicated_judges.max(1))
        };
        let cpu = match self.sc.reward.cpu_workers {
            0 => None,
            c => Some(c),
        };
        let rollout_start = now + reconfig_s;
        self.step = Some(Step {
            index,
            start: now,
            rollout_start,
            reconfig_s,
            tp: self.cluster.tp(),
            cap: self.sc.cap_for_step(index),
            round,
            rollout_end: None,
            preempts: 0,
            deferrals: 0,
            queue_depth: 0,
            tasks: Vec::new(),
            task_of: vec![None; n],
            cpu: WorkerPool::new(cpu),
            judges: WorkerPool::new(judge_slots),
            judge_busy: vec![false; self.cluster.instances.len()],
            rewarded: vec![None; n],
            pending_rewards: 0,
            batch: Vec::new(),
            stream,
            barrier: None,
            finalize_s: 0.0,
            barrier_time: 0.0,
            reward_end: 0.0,
        });
        self.q.schedule(SimTime(rollout_start), EventKind::DecodeTick { step: index })?;
        Ok(())
    }

    fn on_tick(&mut self, index: u32, now: f64) -> Result<()> {
        let dt = self.sc.run.tick;
        match self.current(index) {
            Some(s) if s.rollout_end.is_none() => {}
            _ => return Ok(()),
        }
        for c in self.cluster.tick(now, dt) {
            self.q.schedule(
                SimTime(c.time),
                EventKind::RequestComplete {
                    step: index,
                    request: c.request.0,
                },
            )?;
        }
        if self.cluster.active_instances().any(|i| i.has_work()) {
            self.q.schedule(SimTime(now + dt), EventKind::DecodeTick { step: index })?;
        }
        Ok(())
    }

    fn on_complete(&mut self, index: u32, id: RequestId, now: f64) -> Result<()> {
        let async_rewards = self.sc.run.toggles.reward_scheduler;
        let Some(step) = self.step.as_mut().filter(|s| s.index == index) else {
            return Ok(());
        };
        if step.rollout_end.is_some() {
            return Ok(());
        }
        let outcome = step.round.on_response_complete(id);
        for &a in &outcome.abort {
            self.cluster.abort(a);
        }
        if outcome.retained && async_rewards {
            self.submit_reward(id, now)?;
        }
        let check = match self.step.as_mut().and_then(|s| s.stream.as_mut()) {
            Some(st) if outcome.retained => st.state.on_completion(&self.sc.train),
            _ => ScaleCheck::NoAction,
        };
        if check != ScaleCheck::NoAction {
            self.try_scale_down(check, now)?;
        }
        if outcome.round_complete {
            self.end_rollout(now)?;
        }
        Ok(())
    }

    fn end_rollout(&mut self, now: f64) -> Result<()> {
        let async_rewards = self.sc.run.toggles.reward_scheduler;
        let preempts = self.cluster.preemptions();
        self.cluster.abort_all_in_flight();
        let step = self.step.as_mut().expect("active step");
        step.rollout_end = Some(now);
        step.preempts = preempts;
        step.deferrals = self.sched.finish_round(&step.round);
        step.queue_depth = self.sched.queue.len();
        step.batch = step.round.batch();
        for &r in &step.batch {
            debug_assert_eq!(self.cluster.request(r).state, RequestState::Complete);
        }
        if async_rewards {
            // Rewards of responses whose prompt was deferred are dropped.
            let mut freed = Vec::new();
            for (t, task) in step.tasks.iter_mut().enumerate() {
                if task.outcome.is_none() && !step.round.is_accepted(task.request) {
                    task.cancelled = true;
                    if task.finish.is_some() {
                        freed.push((task.kind, task.host));
                    } else {
                        step.cpu.queue.retain(|&q| q as usize != t);
                        step.judges.queue.retain(|&q| q as usize != t);
                    }
                }
            }
            step.pending_rewards = step
                .batch
                .iter()
                .filter(|&&r| step.rewarded[r.0 as usize].is_none())
                .count();
            for (kind, host) in freed {
                self.release_worker(kind, host, now)?;
            }
        } else {
            let batch = step.batch.clone();
            step.pending_rewards = batch.len();
            for r in batch {
                self.submit_reward(r, now)?;
            }
        }
        self.maybe_finalize(now)
    }

    fn submit_reward(&mut self, id: RequestId, now: f64) -> Result<()> {
        let step = self.step.as_mut().expect("active step");
        let (slot, k) = step.round.locate(id);
        let prompt = &step.round.prompts[slot];
        let req = self.cluster.request(id);
        let draw = reward_draw(self.seed, step.index, prompt, k, req.true_len, &self.reward_model)?;
        let t = step.tasks.len() as u32;
        step.tasks.push(RewardTask {
            request: id,
            kind: prompt.task.into(),
            case: prompt.id.0,
            draw,
            seq_len: req.prompt_len + req.true_len,
            submit: now,
            finish: None,
            verdict: if draw.correct { Outcome::Pass } else { Outcome::Fail },
            outcome: None,
            elapsed: 0.0,
            host: None,
            cancelled: false,
        });
        step.task_of[id.0 as usize] = Some(t);
        let starts = match step.tasks[t as usize].kind {
            RewardKind::Rule => true,
            RewardKind::Sandbox => step.cpu.submit(t),
            RewardKind::Judge => step.judges.submit(t),
        };
        if starts {
            self.start_task(t, now)?;
        }
        Ok(())
    }

    fn start_task(&mut self, t: u32, now: f64) -> Result<()> {
        let colocated = self.sc.colocated_judge();
        let step = self.step.as_mut().expect("active step");
        let index = step.index;
        let (kind, case, draw, seq_len) = {
            let task = &step.tasks[t as usize];
            (task.kind, task.case, task.draw, task.seq_len)
        };
        let mut host = None;
        let duration = match kind {
            RewardKind::Rule => draw.cost,
            RewardKind::Sandbox => {
                let budget = self.timeouts.compute_timeout(case);
                let (verdict, elapsed) = settle_sandbox(draw.cost, draw.correct, budget);
                step.tasks[t as usize].verdict = verdict;
                elapsed
            }
            RewardKind::Judge if colocated => {
                let judge = &self.sc.reward.judge;
                let h = (0..step.judge_busy.len())
                    .find(|&i| !step.judge_busy[i] && self.cluster.instances[i].active)
                    .or_else(|| step.judge_busy.iter().position(|&b| !b))
                    .expect("judge slot available");
                step.judge_busy[h] = true;
                host = Some(h);
                self.cluster.instances[h].throughput_scale = judge.mps_interference;
                let resident = judge.plan_offload(seq_len, judge.reserve_gib)?;
                judge.judge_latency(resident, seq_len)
            }
            RewardKind::Judge => draw.cost,
        };
        let finish = now + duration;
        let task = &mut step.tasks[t as usize];
        task.host = host;
        task.elapsed = duration;
        task.finish = Some(finish);
        self.q.schedule(SimTime(finish), EventKind::RewardDone { step: index, task: t })?;
        Ok(())
    }

    fn release_worker(&mut self, kind: RewardKind, host: Option<usize>, now: f64) -> Result<()> {
        let step = self.step.as_mut().expect("active step");
        let next = match kind {
            RewardKind::Rule => None,
            RewardKind::Sandbox => step.cpu.release(),
            RewardKind::Judge => {
                if let Some(h) = host {
                    step.judge_busy[h] = false;
                    self.cluster.instances[h].throughput_scale = 1.0;
                }
                step.judges.release()
            }
        };
        if let Some(t) = next {
            self.start_task(t, now)?;
        }
        Ok(())
    }

    fn on_reward_done(&mut self, index: u32, t: u32, now: f64) -> Result<()> {
        let Some(step) = self.step.as_mut().filter(|s| s.index == index) else {
            return Ok(());
        };
        let task = &mut step.tasks[t as usize];
        if task.cancelled || task.outcome.is_some() {
            return Ok(());
        }
        let outcome = task.verdict;
        task.outcome = Some(outcome);
        let (kind, host, case, elapsed, request) = (task.kind, task.host, task.case, task.elapsed, task.request);
        if kind == RewardKind::Sandbox {
            self.timeouts.record(case, outcome, elapsed);
        }
        step.rewarded[request.0 as usize] = Some(outcome.reward());
        let in_batch = step.rollout_end.is_some() && step.round.is_accepted(request);
        if in_batch {
            step.pending_rewards -= 1;
        }
        if let Some(st) = step.stream.as_mut() {
            let (slot, _) = step.round.locate(request);
            let p = &step.round.prompts[slot];
            let len = self.cluster.request(request).true_len;
            st.ready.push_back(Sample {
                id: u64::from(request.0),
                tokens: u64::from(p.prompt_len + len),
                reward: Some(outcome.reward()),
                grad: sample_gradient(self.seed, p.id.0, len, outcome.reward(), self.sc.train.grad_dim),
            });
        }
        self.release_worker(kind, host, now)?;
        self.pull_chunks(now)?;
        self.maybe_finalize(now)
    }

    fn try_scale_down(&mut self, check: ScaleCheck, now: f64) -> Result<()> {
        let cfg = &self.sc.train;
        let victims = pick_scale_down_gpus(&self.cluster, cfg.replica_gpus);
        let step = self.step.as_mut().expect("active step");
        let st = step.stream.as_mut().expect("stream round");
        if victims.is_empty() {
            if check == ScaleCheck::Force {
                st.state.scaled_down = true;
            }
            return Ok(());
        }
        if check == ScaleCheck::Evaluate && !meet_scale_criteria(&self.cluster, &victims, &self.stats, cfg, step.cap) {
            return Ok(());
        }
        let victim_gpus = victims.len() as u32 * self.cluster.tp();
        let (moved, cost) = self.cluster.migrate(&victims);
        st.state.scaled_down = true;
        st.scaled_at = Some(st.state.fraction());
        st.migration_s = cost;
        st.migrated = moved;
        st.victim_gpus = victim_gpus;
        st.ready_at = now + cost;
        let replicas = (victim_gpus / cfg.replica_gpus) as usize;
        st.ledger = Some(GradLedger::new(replicas, cfg.grad_dim));
        st.chunks = vec![None; replicas];
        self.out.scale_events.push(ScaleEvent {
            step: step.index,
            time: now,
            fraction: st.state.fraction(),
            migrated: moved,
            migration_s: cost,
        });
        let index = step.index;
        self.q.schedule(SimTime(now + cost), EventKind::MigrationDone { step: index })?;
        self.pull_chunks(now)
    }

    /// Hand rewarded samples to idle training replicas while rollout runs.
    fn pull_chunks(&mut self, now: f64) -> Result<()> {
        let cfg = &self.sc.train;
        let Some(step) = self.step.as_mut() else { return Ok(()) };
        if step.rollout_end.is_some() {
            return Ok(());
        }
        let index = step.index;
        let Some(st) = step.stream.as_mut() else { return Ok(()) };
        if st.ledger.is_none() {
            return Ok(());
        }
        for r in 0..st.chunks.len() {
            if st.chunks[r].is_some() || st.ready.is_empty() {
                continue;
            }
            let take = cfg.micro_batch.min(st.ready.len());
            let chunk: Vec<Sample> = st.ready.drain(..take).collect();
            let tokens: u64 = chunk.iter().map(|s| s.tokens).sum();
            let mut secs = cfg.grad_compute_seconds(tokens, cfg.replica_gpus);
            if cfg.ref_logits {
                secs += tokens as f64 * cfg.ref_secs_per_token_gpu / f64::from(cfg.replica_gpus);
            }
            st.chunks[r] = Some(chunk);
            self.q.schedule(
                SimTime(now.max(st.ready_at) + secs),
                EventKind::TrainChunkDone {
                    step: index,
                    replica: r as u32,
                },
            )?;
        }
        Ok(())
    }

    fn on_chunk_done(&mut self, index: u32, replica: usize, now: f64) -> Result<()> {
        let Some(step) = self.current(index) else { return Ok(()) };
        let st = step.stream.as_mut().expect("stream round");
        let chunk = st.chunks[replica].take().expect("chunk in flight");
        st.streamed += chunk.len();
        st.ledger.as_mut().expect("ledger").stream_grad(replica, &chunk)?;
        self.pull_chunks(now)?;
        self.maybe_finalize(now)
    }

    /// Once rollout, batch rewards and in-flight chunks are done, charge the
    /// final gradient pass and update, then schedule the barrier.
    fn maybe_finalize(&mut self, now: f64) -> Result<()> {
        let cfg = &self.sc.train;
        let total_gpus = self.cluster.spec.total_gpus();
        let step = self.step.as_mut().expect("active step");
        if step.rollout_end.is_none() || step.pending_rewards > 0 || step.barrier.is_some() {
            return Ok(());
        }
        if let Some(st) = &step.stream {
            if st.chunks.iter().any(Option::is_some) {
                return Ok(());
            }
        }
        let tokens_of = |r: RequestId, cl: &Cluster| {
            let q = cl.request(r);
            u64::from(q.prompt_len + q.true_len)
        };
        let leftover_tokens: u64 = match &step.stream {
            Some(st) if st.ledger.is_some() => st.ready.iter().map(|s| s.tokens).sum(),
            _ => step.batch.iter().map(|&r| tokens_of(r, &self.cluster)).sum(),
        };
        let mut finalize = cfg.step_seconds(leftover_tokens, total_gpus);
        if step.stream.as_ref().is_some_and(|s| s.ledger.is_some()) {
            // Replicas hand the GPUs back to the full trainer.
            finalize += cfg.swap_secs;
        }
        step.finalize_s = finalize;
        step.reward_end = step
            .batch
            .iter()
            .filter_map(|&r| step.task_of[r.0 as usize])
            .filter_map(|t| step.tasks[t as usize].finish)
            .fold(f64::NEG_INFINITY, f64::max);
        let barrier = now + finalize;
        step.barrier = Some(barrier);
        let index = step.index;
        self.q.schedule(SimTime(barrier), EventKind::StepBarrier { step: index })?;
        Ok(())
    }

    fn on_barrier(&mut self, index: u32, now: f64) -> Result<()> {
        let seed = self.seed;
        let dim = self.sc.train.grad_dim;
        let step = self.step.as_mut().filter(|s| s.index == index).expect("barrier of active step");
        step.barrier_time = now;
        // Build every batch sample's gradient for the update and the oracle.
        let mut all = Vec::with_capacity(step.batch.len());
        for &r in &step.batch {
            let req = self.cluster.request(r);
            let reward = step.rewarded[r.0 as usize].ok_or(SimError::UnrewardedSample(u64::from(r.0)))?;
            all.push(Sample {
                id: u64::from(r.0),
                tokens: u64::from(req.prompt_len + req.true_len),
                reward: Some(reward),
                grad: sample_gradient(seed, req.prompt.0, req.true_len, reward, dim),
            });
        }
        let finalized = match step.stream.as_ref().and_then(|s| s.ledger.as_ref()) {
            Some(ledger) => {
                let st = step.stream.as_ref().expect("stream");
                let leftover: Vec<Sample> = st.ready.iter().cloned().collect();
                ledger.finalize_update(&leftover, all.len())?
            }
            None => GradLedger::new(1, dim).finalize_update(&all, all.len())?,
        };
        let grads: Vec<Vec<f64>> = all.iter().map(|s| s.grad.clone()).collect();
        self.out.gradients.push(StepGradient {
            step: index,
            finalized,
            oracle: oracle_mean_gradient(&grads)?,
        });
        let lens: Vec<u32> = step.batch.iter().map(|&r| self.cluster.request(r).true_len).collect();
        self.stats.extend(lens.iter().copied());
        self.out.batch_lengths.push(lens);
        if let Some(p) = self.planner.as_mut() {
            let next = p.decide_tp(step.preempts);
            if next != self.cluster.tp() {
                self.pending_tp = Some(next);
            }
        }
        self.q.schedule(SimTime(now + self.sc.run.weight_sync_cost), EventKind::WeightSync { step: index })?;
        Ok(())
    }

    fn on_weight_sync(&mut self, index: u32, now: f64) -> Result<()> {
        let step = self.step.take().filter(|s| s.index == index).expect("sync of active step");
        self.out.reports.push(self.report(&step, now));
        if index + 1 < self.sc.run.num_steps {
            self.q.schedule(SimTime(now), EventKind::StepStart { step: index + 1 })?;
        }
        Ok(())
    }

    fn report(&self, s: &Step, end: f64) -> StepReport {
        let rollout_end = s.rollout_end.expect("rollout ended");
        let batch_tasks: Vec<&RewardTask> = s
            .batch
            .iter()
            .filter_map(|&r| s.task_of[r.0 as usize])
            .map(|t| &s.tasks[t as usize])
            .collect();
        let first_submit = batch_tasks.iter().map(|t| t.submit).fold(f64::INFINITY, f64::min);
        let exposed = (s.reward_end - rollout_end).max(0.0);
        let span = if batch_tasks.is_empty() {
            0.0
        } else {
            s.reward_end - first_submit
        };
        let hidden = (span - exposed).max(0.0);
        let sandbox: Vec<&&RewardTask> = batch_tasks.iter().filter(|t| t.kind == RewardKind::Sandbox).collect();
        let judges: Vec<&&RewardTask> = batch_tasks.iter().filter(|t| t.kind == RewardKind::Judge).collect();
        let judge_mean = if judges.is_empty() {
            0.0
        } else {
            judges.iter().map(|t| t.elapsed).sum::<f64>() / judges.len() as f64
        };
        let resident = if judges.is_empty() || !self.sc.colocated_judge() {
            0.0
        } else {
            let j = &self.sc.reward.judge;
            judges
                .iter()
                .map(|t| f64::from(j.plan_offload(t.seq_len, j.reserve_gib).unwrap_or(0)))
                .sum::<f64>()
                / judges.len() as f64
        };
        let max_len = s.batch.iter().map(|&r| self.cluster.request(r).true_len).max().unwrap_or(0);
        let stream = s.stream.as_ref();
        StepReport {
            step: s.index,
            round_kind: s.round.plan.kind,
            start_s: s.start,
            rollout_s: rollout_end - s.rollout_start,
            reward_hidden_s: hidden,
            reward_exposed_s: exposed,
            train_s: s.barrier_time - rollout_end.max(s.reward_end),
            total_s: end - s.start,
            max_resp_len: max_len,
            tp: s.tp,
            preempts: s.preempts,
            queue_depth: s.queue_depth,
            deferrals: s.deferrals,
            scaled_at: stream.and_then(|x| x.scaled_at),
            migration_s: stream.map_or(0.0, |x| x.migration_s),
            reconfig_s: s.reconfig_s,
            retained: s.batch.len(),
            reward_hidden_fraction: if span > 0.0 { hidden / span } else { 0.0 },
            sandbox_timeouts: sandbox
                .iter()
                .filter(|t| t.outcome == Some(Outcome::TimeoutZero))
                .count() as u32,
            sandbox_cpu_s: sandbox.iter().fold(0.0, |a, t| a + t.elapsed),
            mean_judge_latency: judge_mean,
            resident_layers: resident,
            migrated_requests: stream.map_or(0, |x| x.migrated),
            streamed_samples: stream.map_or(0, |x| x.streamed),
            finalize_s: s.finalize_s,
            synthetic_profile: self.synthetic,
        }
    }
}
