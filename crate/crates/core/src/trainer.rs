//! Stream trainer: mid-round scale-down of rollout GPUs, request migration,
//! streamed gradient accumulation and the deferred, re-normalized update.

use std::collections::HashSet;
use std::fmt;

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

use crate::cluster::Cluster;
use crate::error::{Result, SimError};
use crate::rng::{mix, stream_key, unit_real};

/// When to scale down: guarded adaptive criteria, or unconditionally at a
/// fixed completed fraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Trigger {
    Adaptive,
    Fixed(f64),
}

impl fmt::Display for Trigger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Trigger::Adaptive => f.write_str("adaptive"),
            Trigger::Fixed(x) => write!(f, "{x}"),
        }
    }
}

impl Serialize for Trigger {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Trigger::Adaptive => s.serialize_str("adaptive"),
            Trigger::Fixed(x) => s.serialize_f64(*x),
        }
    }
}

impl<'de> Deserialize<'de> for Trigger {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl de::Visitor<'_> for V {
            type Value = Trigger;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("\"adaptive\" or a completed fraction in (0, 1)")
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Trigger, E> {
                if v == "adaptive" {
                    Ok(Trigger::Adaptive)
                } else {
                    v.parse::<f64>()
                        .map(Trigger::Fixed)
                        .map_err(|_| E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Trigger, E> {
                Ok(Trigger::Fixed(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Trigger, E> {
                Ok(Trigger::Fixed(v as f64))
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Gradient seconds per token on one GPU.
    pub secs_per_token_gpu: f64,
    /// Data-parallel scaling efficiency beyond one replica.
    pub efficiency: f64,
    pub update_secs: f64,
    pub replica_gpus: u32,
    pub micro_batch: usize,
    pub trigger: Trigger,
    pub guard_low: f64,
    pub guard_high: f64,
    pub guard_delta: f64,
    pub milestone: f64,
    pub length_quantile: f64,
    /// Largest acceptable per-request decode slowdown after consolidation.
    pub throughput_bound: f64,
    pub ref_logits: bool,
    pub ref_secs_per_token_gpu: f64,
    pub swap_secs: f64,
    pub grad_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            secs_per_token_gpu: 1.4e-3,
            efficiency: 0.9,
            update_secs: 3.0,
            replica_gpus: 4,
            micro_batch: 8,
            trigger: Trigger::Adaptive,
            guard_low: 0.2,
            guard_high: 0.5,
            guard_delta: 0.05,
            milestone: 0.05,
            length_quantile: 0.95,
            throughput_bound: 0.01,
            ref_logits: false,
            ref_secs_per_token_gpu: 5.0e-5,
            swap_secs: 1.0,
            grad_dim: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.secs_per_token_gpu >= 0.0
            && self.efficiency > 0.0
            && self.efficiency <= 1.0
            && self.update_secs >= 0.0
            && self.replica_gpus >= 1
            && self.micro_batch >= 1
            && self.guard_low <= self.guard_high
            && self.milestone > 0.0
            && (0.0..=1.0).contains(&self.length_quantile)
            && self.throughput_bound >= 0.0
            && self.ref_secs_per_token_gpu >= 0.0
            && self.swap_secs >= 0.0
            && self.grad_dim >= 1
            && match self.trigger {
                Trigger::Adaptive => true,
                Trigger::Fixed(f) => f > 0.0 && f < 1.0,
            };
        if ok {
            Ok(())
        } else {
            Err(SimError::InvalidScenario("train parameters out of range".into()))
        }
    }

    /// Gradient time for `tokens` on `gpus` GPUs.
    pub fn grad_compute_seconds(&self, tokens: u64, gpus: u32) -> f64 {
        let eff = if gpus > self.replica_gpus { self.efficiency } else { 1.0 };
        tokens as f64 * self.secs_per_token_gpu / (f64::from(gpus) * eff)
    }

    pub fn ref_logits_seconds(&self, tokens: u64, gpus: u32) -> f64 {
        if self.ref_logits {
            self.swap_secs + tokens as f64 * self.ref_secs_per_token_gpu / f64::from(gpus)
        } else {
            0.0
        }
    }

    /// Full-batch training time on `gpus` without streaming.
    pub fn step_seconds(&self, tokens: u64, gpus: u32) -> f64 {
        self.ref_logits_seconds(tokens, gpus) + self.grad_compute_seconds(tokens, gpus) + self.update_secs
    }
}

/// Outer guard: completed fraction inside the window and enough progress
/// since the last check.
pub fn check_scale(completed: usize, delta: usize, total: usize, cfg: &TrainConfig) -> bool {
    if total == 0 {
        return false;
    }
    let comp = completed as f64 / total as f64;
    let d = delta as f64 / total as f64;
    comp >= cfg.guard_low - 1e-12 && comp <= cfg.guard_high + 1e-12 && d >= cfg.guard_delta - 1e-12
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamState {
    pub total: usize,
    pub completed: usize,
    pub delta: usize,
    pub scaled_down: bool,
    last_milestone: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleCheck {
    NoAction,
    /// Evaluate the scaling criteria now.
    Evaluate,
    /// Scale down unconditionally.
    Force,
}

impl StreamState {
    pub fn new(total: usize) -> Self {
        Self {
            total,
            completed: 0,
            delta: 0,
            scaled_down: false,
            last_milestone: -1,
        }
    }

    pub fn fraction(&self) -> f64 {
        self.completed as f64 / self.total.max(1) as f64
    }

    /// Count one completion and decide what the trainer should do.
    pub fn on_completion(&mut self, cfg: &TrainConfig) -> ScaleCheck {
        self.completed += 1;
        self.delta += 1;
        if self.scaled_down {
            return ScaleCheck::NoAction;
        }
        match cfg.trigger {
            Trigger::Fixed(f) => {
                if self.fraction() >= f - 1e-12 {
                    ScaleCheck::Force
                } else {
                    ScaleCheck::NoAction
                }
            }
            Trigger::Adaptive => {
                if !check_scale(self.completed, self.delta, self.total, cfg) {
                    return ScaleCheck::NoAction;
                }
                self.delta = 0;
                let m = (self.fraction() / cfg.milestone + 1e-9).floor() as i64;
                if m > self.last_milestone {
                    self.last_milestone = m;
                    ScaleCheck::Evaluate
                } else {
                    ScaleCheck::NoAction
                }
            }
        }
    }
}

/// Half of the active rollout GPUs as whole instances with the least KV in
/// use, or empty when that split is impossible.
pub fn pick_scale_down_gpus(cluster: &Cluster, replica_gpus: u32) -> Vec<usize> {
    let active: Vec<usize> = cluster.active_instances().map(|i| i.id).collect();
    if active.len() < 2 {
        return Vec::new();
    }
    let tp = cluster.tp();
    let gpus = active.len() as u32 * tp;
    let half = gpus / 2;
    if gpus % 2 != 0 || half % tp != 0 || half < replica_gpus {
        return Vec::new();
    }
    let mut order = active;
    order.sort_by_key(|&i| (cluster.instances[i].kv_used, i));
    order.truncate((half / tp) as usize);
    order.sort_unstable();
    order
}

/// Completed response lengths from earlier steps.
#[derive(Debug, Clone, Default)]
pub struct LengthStats {
    sorted: Vec<u32>,
}

impl LengthStats {
    pub fn extend(&mut self, lens: impl IntoIterator<Item = u32>) {
        self.sorted.extend(lens);
        self.sorted.sort_unstable();
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// Quantile `q` of historical lengths at least `generated`, or `cap` when
    /// no history reaches that far.
    pub fn estimate_final(&self, generated: u32, q: f64, cap: u32) -> u32 {
        let start = self.sorted.partition_point(|&l| l < generated.max(1));
        let tail = &self.sorted[start..];
        if tail.is_empty() {
            return cap.max(generated);
        }
        let idx = ((tail.len() - 1) as f64 * q).round() as usize;
        tail[idx].max(generated)
    }
}

/// Peak KV tokens of requests `(kv_now, remaining)` if all keep decoding in
/// lockstep and free their cache right after their last token.
pub fn projected_peak_kv(mut reqs: Vec<(u64, u64)>) -> u64 {
    reqs.sort_by_key(|&(_, rem)| rem);
    let mut suffix: u64 = reqs.iter().map(|&(kv, _)| kv).sum();
    let mut peak = suffix;
    for (j, &(kv, rem)) in reqs.iter().enumerate() {
        let alive = (reqs.len() - j) as u64;
        peak = peak.max(suffix + alive * rem);
        suffix -= kv;
    }
    peak
}

/// Scaling criteria for consolidating all in-flight requests onto the
/// instances not in `candidate`.
pub fn meet_scale_criteria(
    cluster: &Cluster,
    candidate: &[usize],
    stats: &LengthStats,
    cfg: &TrainConfig,
    cap: u32,
) -> bool {
    if candidate.is_empty() {
        return false;
    }
    let remaining: Vec<usize> = cluster
        .active_instances()
        .map(|i| i.id)
        .filter(|i| !candidate.contains(i))
        .collect();
    if remaining.is_empty() {
        return false;
    }
    let capacity: u64 = remaining.iter().map(|&i| cluster.instances[i].kv_capacity).sum();
    let inflight: Vec<(u64, u64)> = cluster
        .requests
        .iter()
        .filter(|r| r.is_in_flight() && r.instance.is_some_and(|i| cluster.instances[i].active))
        .map(|r| {
            let est = stats.estimate_final(r.generated, cfg.length_quantile, cap);
            (r.kv_tokens(), u64::from(est - r.generated))
        })
        .collect();
    let n = inflight.len();
    if projected_peak_kv(inflight) > capacity {
        return false;
    }
    decode_slowdown(cluster, n, cluster.active_instances().count(), remaining.len()) <= cfg.throughput_bound
}

/// Relative drop of per-request decode speed when `n` requests move from
/// `before` to `after` instances.
pub fn decode_slowdown(cluster: &Cluster, n: usize, before: usize, after: usize) -> f64 {
    if n == 0 || before == 0 || after == 0 {
        return 0.0;
    }
    let tp = cluster.tp();
    let per = |inst: usize| {
        let b = n.div_ceil(inst);
        cluster.profile().decode_tps(tp, b) / b as f64
    };
    (1.0 - per(after) / per(before)).max(0.0)
}

/// Abstract training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub tokens: u64,
    pub reward: Option<f64>,
    pub grad: Vec<f64>,
}

/// Deterministic pseudo-gradient of one rewarded response.
pub fn sample_gradient(seed: u64, prompt: u32, len: u32, reward: f64, dim: usize) -> Vec<f64> {
    let key = mix(mix(stream_key("grad", seed), u64::from(prompt)), u64::from(len));
    let key = mix(key, reward.to_bits());
    (0..dim).map(|j| unit_real(mix(key, j as u64)) * (1.0 + reward)).collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplicaLedger {
    pub sample_count: usize,
    pub gradient_sum: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradLedger {
    pub dim: usize,
    pub replicas: Vec<ReplicaLedger>,
    consumed: HashSet<u64>,
}

impl GradLedger {
    pub fn new(replicas: usize, dim: usize) -> Self {
        Self {
            dim,
            replicas: (0..replicas)
                .map(|_| ReplicaLedger {
                    sample_count: 0,
                    gradient_sum: vec![0.0; dim],
                })
                .collect(),
            consumed: HashSet::new(),
        }
    }

    pub fn total_samples(&self) -> usize {
        self.replicas.iter().map(|r| r.sample_count).sum()
    }

    /// Accumulate `samples` on `replica` without applying any update.
    pub fn stream_grad(&mut self, replica: usize, samples: &[Sample]) -> Result<()> {
        for s in samples {
            if s.reward.is_none() {
                return Err(SimError::UnrewardedSample(s.id));
            }
            if !self.consumed.insert(s.id) {
                return Err(SimError::DuplicateSample(s.id));
            }
            let r = &mut self.replicas[replica];
            r.sample_count += 1;
            for (acc, g) in r.gradient_sum.iter_mut().zip(&s.grad) {
                *acc += g;
            }
        }
        Ok(())
    }

    /// Final gradient: all sums over all samples, divided by the sample count.
    pub fn finalize_update(&self, leftover: &[Sample], expected: usize) -> Result<Vec<f64>> {
        let total = self.total_samples() + leftover.len();
        if total != expected {
            return Err(SimError::SampleCountMismatch { got: total, expected });
        }
        if total == 0 {
            return Err(SimError::EmptySamples);
        }
        let mut sum = vec![0.0; self.dim];
        for r in &self.replicas {
            for (a, g) in sum.iter_mut().zip(&r.gradient_sum) {
                *a += g;
            }
        }
        for s in leftover {
            if s.reward.is_none() {
                return Err(SimError::UnrewardedSample(s.id));
            }
            if self.consumed.contains(&s.id) {
                return Err(SimError::DuplicateSample(s.id));
            }
            for (a, g) in sum.iter_mut().zip(&s.grad) {
                *a += g;
            }
        }
        Ok(sum.into_iter().map(|x| x / total as f64).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{ClusterSpec, ModelSize, Request, RequestId};
    use crate::workload::PromptId;

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn guard_window() {
        assert!(!check_scale(19, 19, 100, &cfg()));
        assert!(check_scale(30, 6, 100, &cfg()));
        assert!(!check_scale(55, 10, 100, &cfg()));
        assert!(!check_scale(30, 4, 100, &cfg()));
    }

    #[test]
    fn guard_resets_delta_and_stops_after_window() {
        let c = cfg();
        let mut s = StreamState::new(100);
        let mut evals = Vec::new();
        for _ in 0..100 {
            if s.on_completion(&c) == ScaleCheck::Evaluate {
                evals.push(s.completed);
            }
        }
        assert_eq!(evals, vec![20, 25, 30, 35, 40, 45, 50]);
    }

    #[test]
    fn fixed_trigger_forces_once_fraction_reached() {
        let c = TrainConfig {
            trigger: Trigger::Fixed(0.3),
            ..cfg()
        };
        let mut s = StreamState::new(10);
        let got: Vec<_> = (0..3).map(|_| s.on_completion(&c)).collect();
        assert_eq!(got, vec![ScaleCheck::NoAction, ScaleCheck::NoAction, ScaleCheck::Force]);
    }

    fn cluster(gpus: u32, tp: u32) -> Cluster {
        let spec = ClusterSpec::new(1, gpus, ModelSize::B7);
        Cluster::new(spec, ModelSize::B7.synthetic_profile().build(gpus), tp, 0.0).unwrap()
    }

    #[test]
    fn pick_half_of_tp2_instances() {
        let c = cluster(8, 2);
        assert_eq!(pick_scale_down_gpus(&c, 2).len(), 2);
    }

    #[test]
    fn single_instance_cannot_halve() {
        let c = cluster(2, 2);
        assert!(pick_scale_down_gpus(&c, 1).is_empty());
    }

    #[test]
    fn replica_larger_than_half_aborts() {
        let c = cluster(4, 1);
        assert!(pick_scale_down_gpus(&c, 4).is_empty());
    }

    #[test]
    fn picks_least_loaded_instances() {
        let mut c = cluster(4, 1);
        c.instances[0].kv_used = 10;
        c.instances[1].kv_used = 1;
        c.instances[2].kv_used = 5;
        c.instances[3].kv_used = 0;
        assert_eq!(pick_scale_down_gpus(&c, 1), vec![1, 3]);
    }

    // Brute-force peak over every integer time step.
    fn brute_peak(reqs: &[(u64, u64)]) -> u64 {
        let horizon = reqs.iter().map(|r| r.1).max().unwrap_or(0);
        (0..=horizon)
            .map(|t| reqs.iter().filter(|r| r.1 >= t).map(|r| r.0 + t).sum::<u64>())
            .max()
            .unwrap_or(0)
    }

    #[test]
    fn peak_projection_matches_brute_force() {
        let cases: Vec<Vec<(u64, u64)>> = vec![
            vec![(10, 5)],
            vec![(10, 5), (20, 1), (3, 9)],
            vec![(100, 0), (5, 50), (5, 51), (0, 2)],
            vec![(7, 3), (7, 3), (1, 40)],
        ];
        for c in cases {
            assert_eq!(projected_peak_kv(c.clone()), brute_peak(&c), "{c:?}");
        }
    }

    fn loaded(n: u32, plen: u32, gen: u32) -> Cluster {
        let mut c = cluster(2, 1);
        c.load_requests(
            (0..n)
                .map(|i| {
                    let mut r = Request::new(RequestId(i), PromptId(i), plen, gen + 1000);
                    r.generated = gen;
                    r
                })
                .collect(),
        );
        for i in 0..n {
            c.admit((i % 2) as usize, RequestId(i));
        }
        c
    }

    #[test]
    fn tiny_remaining_requests_pass() {
        let c = loaded(4, 10, 0);
        let mut stats = LengthStats::default();
        stats.extend([20, 30, 40]);
        assert!(meet_scale_criteria(&c, &[1], &stats, &cfg(), 1024));
    }

    #[test]
    fn criteria_capacity_boundary() {
        let mut stats = LengthStats::default();
        stats.extend([100]);
        let mut c = loaded(2, 50, 0);
        // Two requests, 50 prompt + 100 final each: peak 300 tokens.
        c.instances[0].kv_capacity = 300;
        assert!(meet_scale_criteria(&c, &[1], &stats, &cfg(), 1024));
        c.instances[0].kv_capacity = 299;
        assert!(!meet_scale_criteria(&c, &[1], &stats, &cfg(), 1024));
    }

    #[test]
    fn length_estimate_is_conditional() {
        let mut s = LengthStats::default();
        s.extend((1..=100).map(|x| x * 10));
        assert_eq!(s.estimate_final(0, 0.95, 4096), 950);
        assert_eq!(s.estimate_final(995, 0.95, 4096), 1000);
        assert_eq!(s.estimate_final(1001, 0.95, 4096), 4096);
    }

    fn sample(id: u64, g: f64) -> Sample {
        Sample {
            id,
            tokens: 1,
            reward: Some(1.0),
            grad: vec![g],
        }
    }

    #[test]
    fn renormalization_is_per_sample_not_per_replica() {
        let mut l = GradLedger::new(2, 1);
        l.stream_grad(0, &[sample(0, 1.0), sample(1, 2.0), sample(2, 3.0)]).unwrap();
        l.stream_grad(1, &[sample(3, 10.0)]).unwrap();
        assert_eq!(l.finalize_update(&[], 4).unwrap(), vec![4.0]);
    }

    #[test]
    fn streaming_rejects_unrewarded_and_duplicates() {
        let mut l = GradLedger::new(1, 1);
        let mut s = sample(0, 1.0);
        s.reward = None;
        assert!(matches!(l.stream_grad(0, &[s]), Err(SimError::UnrewardedSample(0))));
        l.stream_grad(0, &[sample(1, 1.0)]).unwrap();
        assert!(matches!(l.stream_grad(0, &[sample(1, 1.0)]), Err(SimError::DuplicateSample(1))));
        assert!(l.stream_grad(0, &[]).is_ok());
    }

    #[test]
    fn wrong_total_is_an_accounting_error() {
        let l = GradLedger::new(1, 1);
        assert!(matches!(
            l.finalize_update(&[sample(0, 1.0)], 2),
            Err(SimError::SampleCountMismatch { got: 1, expected: 2 })
        ));
    }

    #[test]
    fn trigger_serde_forms() {
        #[derive(Deserialize, Serialize, PartialEq, Debug)]
        struct W {
            t: Trigger,
        }
        let a: W = toml::from_str("t = \"adaptive\"").unwrap();
        assert_eq!(a.t, Trigger::Adaptive);
        let f: W = toml::from_str("t = 0.3").unwrap();
        assert_eq!(f.t, Trigger::Fixed(0.3));
        let back: W = toml::from_str(&toml::to_string(&f).unwrap()).unwrap();
        assert_eq!(back, f);
    }
}
