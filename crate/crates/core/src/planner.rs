//! Per-step TP selection driven by preemption counts.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterSpec, ThroughputProfile};
use crate::error::{Result, SimError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    pub rise_threshold: f64,
    pub zero_window: usize,
    /// Preemptions that count as a rise when the previous step had none.
    pub absolute_floor: u64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            rise_threshold: 1.05,
            zero_window: 4,
            absolute_floor: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerState {
    pub cfg: PlannerConfig,
    pub current_tp: u32,
    pub max_tp: u32,
    history: VecDeque<u64>,
}

impl PlannerState {
    pub fn new(cfg: PlannerConfig, tp: u32, gpus_per_node: u32) -> Self {
        Self {
            cfg,
            current_tp: tp,
            max_tp: gpus_per_node,
            history: VecDeque::new(),
        }
    }

    pub fn history(&self) -> impl Iterator<Item = u64> + '_ {
        self.history.iter().copied()
    }

    /// Feed the last step's preemption count and return the TP for the next
    /// step. History is cleared whenever the TP changes.
    pub fn decide_tp(&mut self, preempts: u64) -> u32 {
        let rose = match self.history.back() {
            Some(&prev) if prev > 0 => preempts as f64 > self.cfg.rise_threshold * prev as f64,
            Some(_) => preempts > self.cfg.absolute_floor,
            None => false,
        };
        self.history.push_back(preempts);
        while self.history.len() > self.cfg.zero_window {
            self.history.pop_front();
        }
        let quiet = self.history.len() == self.cfg.zero_window && self.history.iter().all(|&c| c == 0);
        let next = if rose && self.current_tp < self.max_tp {
            self.current_tp * 2
        } else if quiet && self.current_tp > 1 {
            self.current_tp / 2
        } else {
            self.current_tp
        };
        if next != self.current_tp {
            self.history.clear();
            self.current_tp = next;
        }
        next
    }
}

/// Workload shape used to choose the starting TP.
#[derive(Debug, Clone)]
pub struct WorkloadSummary {
    /// Expected final response length of every request in a baseline round.
    pub lengths: Vec<f64>,
    pub prompt_len: f64,
}

/// Fluid-model rollout time for one baseline round at `tp`: requests are
/// spread round-robin (longest first) over the instances and each instance
/// admits as many as fit at their final footprint.
pub fn fluid_rollout_time(
    profile: &ThroughputProfile,
    spec: &ClusterSpec,
    reserve_gib: f64,
    tp: u32,
    w: &WorkloadSummary,
) -> Option<f64> {
    let instances = (spec.total_gpus() / tp) as usize;
    let capacity = spec.kv_capacity(tp, reserve_gib) as f64;
    let mut sorted = w.lengths.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    if instances == 0 || sorted.first().is_some_and(|&l| l + w.prompt_len > capacity) {
        return None;
    }
    // Slowest instance is the one receiving the longest request.
    let mine: Vec<f64> = sorted.iter().step_by(instances).copied().collect();
    let mut waiting: VecDeque<f64> = mine.into_iter().collect();
    let mut active: Vec<f64> = Vec::new();
    let mut used = 0.0;
    let mut t = 0.0;
    loop {
        while let Some(&next) = waiting.front() {
            if used + next + w.prompt_len > capacity && !active.is_empty() {
                break;
            }
            used += next + w.prompt_len;
            active.push(next);
            waiting.pop_front();
        }
        if active.is_empty() {
            return Some(t);
        }
        let n = active.len();
        let rate = profile.decode_tps(tp, n) / n as f64;
        let step = active.iter().copied().fold(f64::INFINITY, f64::min);
        t += step / rate;
        for a in &mut active {
            *a -= step;
        }
        let mut i = 0;
        while i < active.len() {
            if active[i] <= 1e-9 {
                active.swap_remove(i);
                // Footprint of a finished request is approximated by the
                // average remaining reservation.
                used = active.iter().map(|&r| r + w.prompt_len).sum::<f64>();
            } else {
                i += 1;
            }
        }
        if active.is_empty() && waiting.is_empty() {
            return Some(t);
        }
    }
}

/// TP with the lowest fluid-model rollout time; ties go to the smaller TP.
pub fn initial_tp(
    profile: &ThroughputProfile,
    spec: &ClusterSpec,
    reserve_gib: f64,
    w: &WorkloadSummary,
) -> Result<u32> {
    if profile.is_empty() {
        return Err(SimError::EmptyProfile);
    }
    let mut best: Option<(u32, f64)> = None;
    for tp in profile.tp_sizes().filter(|&tp| tp <= spec.gpus_per_node) {
        if let Some(t) = fluid_rollout_time(profile, spec, reserve_gib, tp, w) {
            if best.is_none_or(|(_, b)| t < b) {
                best = Some((tp, t));
            }
        }
    }
    best.map(|(tp, _)| tp)
        .ok_or_else(|| SimError::InvalidScenario("no TP size fits the workload".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{ModelSize, ProfilePoint};
    use std::collections::BTreeMap;

    fn state(tp: u32) -> PlannerState {
        PlannerState::new(PlannerConfig::default(), tp, 8)
    }

    #[test]
    fn ten_percent_rise_doubles() {
        let mut s = state(2);
        s.decide_tp(100);
        assert_eq!(s.decide_tp(110), 4);
    }

    #[test]
    fn four_percent_rise_holds() {
        let mut s = state(2);
        s.decide_tp(100);
        assert_eq!(s.decide_tp(104), 2);
    }

    #[test]
    fn exact_threshold_holds() {
        let mut s = state(2);
        s.decide_tp(100);
        assert_eq!(s.decide_tp(105), 2);
    }

    #[test]
    fn four_quiet_steps_halve() {
        let mut s = state(4);
        for _ in 0..3 {
            assert_eq!(s.decide_tp(0), 4);
        }
        assert_eq!(s.decide_tp(0), 2);
        assert_eq!(s.history().count(), 0);
    }

    #[test]
    fn bounds_respected() {
        let mut s = state(8);
        s.decide_tp(100);
        assert_eq!(s.decide_tp(1000), 8);
        let mut s = state(1);
        for _ in 0..4 {
            assert_eq!(s.decide_tp(0), 1);
        }
    }

    #[test]
    fn jump_from_zero_needs_floor() {
        let mut s = state(1);
        s.decide_tp(0);
        assert_eq!(s.decide_tp(10), 1);
        let mut s = state(1);
        s.decide_tp(0);
        assert_eq!(s.decide_tp(11), 2);
    }

    #[test]
    fn no_double_right_after_halving_without_rise() {
        let mut s = state(4);
        for _ in 0..4 {
            s.decide_tp(0);
        }
        assert_eq!(s.current_tp, 2);
        assert_eq!(s.decide_tp(5), 2);
    }

    fn profile_with(tp2_boost: f64) -> ThroughputProfile {
        let mut rows = BTreeMap::new();
        for tp in [1u32, 2, 4, 8] {
            let scale = if tp == 2 { tp2_boost } else { 1.0 };
            rows.insert(
                tp,
                [1.0, 64.0, 4096.0]
                    .iter()
                    .map(|&b| ProfilePoint {
                        batch: b,
                        decode_tps: 30.0 * b.sqrt() * scale,
                        prefill_tps: 10_000.0,
                    })
                    .collect(),
            );
        }
        ThroughputProfile::from_rows(rows).unwrap()
    }

    fn summary() -> WorkloadSummary {
        WorkloadSummary {
            lengths: (0..256).map(|i| 200.0 + 10.0 * f64::from(i)).collect(),
            prompt_len: 100.0,
        }
    }

    #[test]
    fn dominant_tp_wins() {
        let spec = ClusterSpec::new(1, 8, ModelSize::B7);
        assert_eq!(initial_tp(&profile_with(10.0), &spec, 0.0, &summary()).unwrap(), 2);
    }

    #[test]
    fn ties_go_to_smaller_tp() {
        // One request, identical single-stream speed at every TP.
        let spec = ClusterSpec::new(1, 8, ModelSize::B7);
        let mut rows = BTreeMap::new();
        for tp in [1u32, 2] {
            rows.insert(
                tp,
                vec![ProfilePoint {
                    batch: 1.0,
                    decode_tps: 100.0,
                    prefill_tps: 1000.0,
                }],
            );
        }
        let p = ThroughputProfile::from_rows(rows).unwrap();
        let w = WorkloadSummary {
            lengths: vec![1000.0],
            prompt_len: 10.0,
        };
        assert_eq!(initial_tp(&p, &spec, 0.0, &w).unwrap(), 1);
    }

    #[test]
    fn empty_profile_rejected() {
        let spec = ClusterSpec::new(1, 8, ModelSize::B7);
        assert!(matches!(
            initial_tp(&ThroughputProfile::default(), &spec, 0.0, &summary()),
            Err(SimError::EmptyProfile)
        ));
    }
}
