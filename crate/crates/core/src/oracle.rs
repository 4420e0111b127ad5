//! Reference model of the plain synchronous loop: every step launches P₀·R₀
//! requests, waits for all of them, scores the batch, trains, syncs weights.
//! It walks time directly instead of through the event queue so the
//! simulator with every toggle off can be checked against it bit for bit.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};

use crate::cluster::{Cluster, Request, RequestId};
use crate::error::{Result, SimError};
use crate::metrics::StepReport;
use crate::reward::{settle_sandbox, Outcome, RewardKind};
use crate::rollout::{dispatch, EpochLog, RoundKind};
use crate::scenario::{Scenario, Toggles};
use crate::sim::{population, reward_draw, starting_tp, LengthSource};
use crate::workload::{PromptId, PromptSource};

/// Result of checking one epoch's training log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Coverage {
    Ok,
    MissingPrompts(Vec<PromptId>),
    DuplicatePrompts(Vec<PromptId>),
}

/// Every prompt of the population must be trained exactly once.
pub fn check_coverage(log: &EpochLog, population: usize) -> Coverage {
    let mut seen = BTreeSet::new();
    let mut dups = BTreeSet::new();
    for &p in &log.trained {
        if !seen.insert(p) {
            dups.insert(p);
        }
    }
    if !dups.is_empty() {
        return Coverage::DuplicatePrompts(dups.into_iter().collect());
    }
    let missing: Vec<PromptId> = (0..population as u32)
        .map(PromptId)
        .filter(|p| !seen.contains(p))
        .collect();
    if missing.is_empty() {
        Coverage::Ok
    } else {
        Coverage::MissingPrompts(missing)
    }
}

/// Plain mean of per-sample gradients, summed in order.
pub fn oracle_mean_gradient(grads: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = grads.first().ok_or(SimError::EmptySamples)?;
    let mut sum = vec![0.0; first.len()];
    for g in grads {
        for (a, x) in sum.iter_mut().zip(g) {
            *a += x;
        }
    }
    let n = grads.len() as f64;
    Ok(sum.into_iter().map(|x| x / n).collect())
}

struct Scored {
    kind: RewardKind,
    finish: f64,
    elapsed: f64,
    outcome: Outcome,
}

/// FIFO pool: each task starts at the earliest free worker.
fn pool_finish(free: &mut BinaryHeap<Reverse<OrdF64>>, cap: Option<usize>, now: f64, dur: f64) -> f64 {
    let start = match cap {
        Some(c) if free.len() >= c => {
            let Reverse(OrdF64(t)) = free.pop().expect("pool has workers");
            t.max(now)
        }
        _ => now,
    };
    let finish = start + dur;
    if cap.is_some() {
        free.push(Reverse(OrdF64(finish)));
    }
    finish
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF64(f64);
impl Eq for OrdF64 {}
impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for OrdF64 {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&o.0)
    }
}

/// Simulate the baseline loop for `scenario`, ignoring its toggles.
pub fn run_baseline(scenario: &Scenario) -> Result<Vec<StepReport>> {
    let mut sc = scenario.clone();
    sc.run.toggles = Toggles::NONE;
    sc.validate()?;
    let seed = sc.run.seed;
    let profile = sc.throughput_profile()?;
    let synthetic = profile.synthetic;
    let tp = starting_tp(&sc, &profile)?;
    let mut cluster = Cluster::new(sc.cluster.spec(), profile, tp, 0.0)?;
    let (pop, trace) = population(&sc)?;
    let mut source = PromptSource::new(pop, seed);
    let mut lengths = LengthSource::new(seed, trace);
    let costs = sc.reward.cost_model();
    let total_gpus = sc.cluster.spec().total_gpus();
    let dt = sc.run.tick;
    let cpu_cap = match sc.reward.cpu_workers {
        0 => None,
        c => Some(c),
    };
    let judge_cap = Some(sc.reward.dedicated_judges.max(1));
    let rpp = sc.run.responses_per_prompt;

    let mut reports = Vec::new();
    let mut clock = 0.0;
    for step in 0..sc.run.num_steps {
        if source.remaining() == 0 {
            source.next_epoch();
        }
        let prompts = source.draw(sc.run.prompts_per_step);
        let mut requests = Vec::new();
        for (slot, p) in prompts.iter().enumerate() {
            for k in 0..rpp {
                let len = lengths.length(&sc, step, p, k);
                requests.push(Request::new(RequestId((slot * rpp + k) as u32), p.id, p.prompt_len, len));
            }
        }
        let n = requests.len();
        cluster.load_requests(requests);
        let ids: Vec<RequestId> = (0..n as u32).map(RequestId).collect();
        dispatch(&mut cluster, &ids);

        let start = clock;
        let mut t = start;
        let mut done = Vec::with_capacity(n);
        loop {
            done.extend(cluster.tick(t, dt));
            if !cluster.active_instances().any(|i| i.has_work()) {
                break;
            }
            t += dt;
        }
        if done.len() != n {
            return Err(SimError::QueueDrained {
                completed: done.len(),
                expected: n,
            });
        }
        done.sort_by(|a, b| a.time.total_cmp(&b.time));
        let rollout_end = done.last().map_or(start, |c| c.time);
        let preempts = cluster.preemptions();

        let mut cpu = BinaryHeap::new();
        let mut judges = BinaryHeap::new();
        let mut scored = Vec::with_capacity(n);
        let mut tokens = 0u64;
        for c in &done {
            let req = cluster.request(c.request);
            let (slot, k) = (c.request.0 as usize / rpp, c.request.0 as usize % rpp);
            let prompt = &prompts[slot];
            tokens += u64::from(req.prompt_len + req.true_len);
            let draw = reward_draw(seed, step, prompt, k, req.true_len, &costs)?;
            let kind = RewardKind::from(prompt.task);
            let verdict = if draw.correct { Outcome::Pass } else { Outcome::Fail };
            let s = match kind {
                RewardKind::Rule => Scored {
                    kind,
                    finish: rollout_end + draw.cost,
                    elapsed: draw.cost,
                    outcome: verdict,
                },
                RewardKind::Sandbox => {
                    let (outcome, elapsed) = settle_sandbox(draw.cost, draw.correct, sc.reward.timeout.t_max);
                    Scored {
                        kind,
                        finish: pool_finish(&mut cpu, cpu_cap, rollout_end, elapsed),
                        elapsed,
                        outcome,
                    }
                }
                RewardKind::Judge => Scored {
                    kind,
                    finish: pool_finish(&mut judges, judge_cap, rollout_end, draw.cost),
                    elapsed: draw.cost,
                    outcome: verdict,
                },
            };
            scored.push(s);
        }
        let reward_end = scored.iter().map(|s| s.finish).fold(f64::NEG_INFINITY, f64::max);
        let finalize_s = sc.train.step_seconds(tokens, total_gpus);
        let barrier = reward_end + finalize_s;
        let end = barrier + sc.run.weight_sync_cost;

        let sandbox: Vec<&Scored> = scored.iter().filter(|s| s.kind == RewardKind::Sandbox).collect();
        let judged: Vec<&Scored> = scored.iter().filter(|s| s.kind == RewardKind::Judge).collect();
        let exposed = (reward_end - rollout_end).max(0.0);
        let span = reward_end - rollout_end;
        let hidden = (span - exposed).max(0.0);
        reports.push(StepReport {
            step,
            round_kind: RoundKind::Baseline,
            start_s: start,
            rollout_s: rollout_end - start,
            reward_hidden_s: hidden,
            reward_exposed_s: exposed,
            train_s: barrier - rollout_end.max(reward_end),
            total_s: end - start,
            max_resp_len: done.iter().map(|c| cluster.request(c.request).true_len).max().unwrap_or(0),
            tp,
            preempts,
            queue_depth: 0,
            deferrals: 0,
            scaled_at: None,
            migration_s: 0.0,
            reconfig_s: 0.0,
            retained: n,
            reward_hidden_fraction: if span > 0.0 { hidden / span } else { 0.0 },
            sandbox_timeouts: sandbox.iter().filter(|s| s.outcome == Outcome::TimeoutZero).count() as u32,
            sandbox_cpu_s: sandbox.iter().fold(0.0, |a, s| a + s.elapsed),
            mean_judge_latency: if judged.is_empty() {
                0.0
            } else {
                judged.iter().map(|s| s.elapsed).sum::<f64>() / judged.len() as f64
            },
            resident_layers: 0.0,
            migrated_requests: 0,
            streamed_samples: 0,
            finalize_s,
            synthetic_profile: synthetic,
        });
        clock = end;
    }
    Ok(reports)
}
