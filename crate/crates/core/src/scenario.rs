//! Scenario files: one TOML document describing the run, cluster, workload,
//! reward, training and planner settings.
//!
//! ```toml
//! [run]
//! seed = 7
//! num_steps = 10
//! spec_factor = 1.25
//!
//! [run.toggles]
//! tail_batching = true
//! planner = false
//!
//! [cluster]
//! model = "14b"
//! num_nodes = 4
//! tp = "auto"
//!
//! [workload]
//! task = "code"
//! ```
//!
//! Every section and key is optional; unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

use crate::cluster::{ClusterSpec, ModelSize, SyntheticProfile, ThroughputProfile};
use crate::error::{Result, SimError};
use crate::planner::PlannerConfig;
use crate::reward::{JudgeModel, TimeoutConfig};
use crate::rollout::RolloutConfig;
use crate::trainer::TrainConfig;
use crate::workload::{CodeExecModel, LengthFamily, LengthModel, RewardCostModel, TaskMix, MEDIAN_AT_16K};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    pub tail_batching: bool,
    pub planner: bool,
    pub reward_scheduler: bool,
    pub stream_trainer: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self::ALL
    }
}

impl Toggles {
    pub const NONE: Toggles = Toggles {
        tail_batching: false,
        planner: false,
        reward_scheduler: false,
        stream_trainer: false,
    };
    pub const ALL: Toggles = Toggles {
        tail_batching: true,
        planner: true,
        reward_scheduler: true,
        stream_trainer: true,
    };

    pub fn is_baseline(&self) -> bool {
        *self == Self::NONE
    }

    /// Short label such as `tb+reward`; `none` when everything is off.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [
            (self.tail_batching, "tb"),
            (self.reward_scheduler, "reward"),
            (self.planner, "planner"),
            (self.stream_trainer, "trainer"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }

    /// Parse `none`, `all` or a `+`-separated list of `tb`, `reward`,
    /// `planner`, `trainer`.
    pub fn parse(s: &str) -> Result<Toggles> {
        let s = s.trim();
        match s {
            "none" | "baseline" => return Ok(Toggles::NONE),
            "all" => return Ok(Toggles::ALL),
            _ => {}
        }
        let mut t = Toggles::NONE;
        for part in s.split('+') {
            match part.trim() {
                "tb" | "tail_batching" => t.tail_batching = true,
                "reward" | "reward_scheduler" => t.reward_scheduler = true,
                "planner" | "parallelism" => t.planner = true,
                "trainer" | "stream_trainer" => t.stream_trainer = true,
                other => return Err(SimError::Config(format!("unknown toggle {other:?}"))),
            }
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub num_steps: u32,
    pub spec_factor: f64,
    pub prompts_per_step: usize,
    pub responses_per_prompt: usize,
    pub max_response_len: u32,
    pub weight_sync_cost: f64,
    /// Decode tick length in virtual seconds.
    pub tick: f64,
    /// Upper bound on requests resident per instance.
    pub max_requests_per_instance: usize,
    pub toggles: Toggles,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_steps: 10,
            spec_factor: 1.25,
            prompts_per_step: 128,
            responses_per_prompt: 8,
            max_response_len: 16_384,
            weight_sync_cost: 2.0,
            tick: 0.1,
            max_requests_per_instance: 4096,
            toggles: Toggles::ALL,
        }
    }
}

impl RunConfig {
    pub fn rollout(&self) -> RolloutConfig {
        RolloutConfig {
            tail_batching: self.toggles.tail_batching,
            spec_factor: self.spec_factor,
            prompts_per_step: self.prompts_per_step,
            responses_per_prompt: self.responses_per_prompt,
        }
    }
}

/// Requested rollout TP: a fixed size or chosen from the profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TpChoice {
    Auto,
    Fixed(u32),
}

impl Serialize for TpChoice {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TpChoice::Auto => s.serialize_str("auto"),
            TpChoice::Fixed(n) => s.serialize_u32(*n),
        }
    }
}

impl<'de> Deserialize<'de> for TpChoice {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl de::Visitor<'_> for V {
            type Value = TpChoice;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("\"auto\" or a positive integer")
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<TpChoice, E> {
                if v == "auto" {
                    Ok(TpChoice::Auto)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<TpChoice, E> {
                u32::try_from(v)
                    .ok()
                    .filter(|&n| n > 0)
                    .map(TpChoice::Fixed)
                    .ok_or_else(|| E::invalid_value(de::Unexpected::Signed(v), &self))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<TpChoice, E> {
                self.visit_i64(v as i64)
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub model: ModelSize,
    pub num_nodes: u32,
    pub gpus_per_node: u32,
    pub tp: TpChoice,
    pub gpu_mem_gib: f64,
    pub mem_utilization: f64,
    pub pcie_gib_s: f64,
    pub reconfig_cost: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights_gib: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kv_mib_per_token: Option<f64>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            model: ModelSize::B14,
            num_nodes: 4,
            gpus_per_node: 8,
            tp: TpChoice::Fixed(2),
            gpu_mem_gib: 80.0,
            mem_utilization: 0.9,
            pcie_gib_s: 12.0,
            reconfig_cost: 5.0,
            weights_gib: None,
            kv_mib_per_token: None,
        }
    }
}

impl ClusterConfig {
    pub fn spec(&self) -> ClusterSpec {
        let mut s = ClusterSpec::new(self.num_nodes, self.gpus_per_node, self.model);
        s.gpu_mem_gib = self.gpu_mem_gib;
        s.mem_utilization = self.mem_utilization;
        s.pcie_gib_s = self.pcie_gib_s;
        s.reconfig_cost = self.reconfig_cost;
        if let Some(w) = self.weights_gib {
            s.weights_gib = w;
        }
        if let Some(k) = self.kv_mib_per_token {
            s.kv_mib_per_token = k;
        }
        s
    }
}

/// Response cap growing during the run: `min(end, start + increment * (step / every))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapRamp {
    pub start: u32,
    pub end: u32,
    pub increment: u32,
    #[serde(default = "one")]
    pub every: u32,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadConfig {
    pub task: TaskMix,
    pub dataset_size: usize,
    pub family: LengthFamily,
    /// Population median response length; scales with the cap when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median: Option<f64>,
    pub sigma_prompt: f64,
    pub sigma_response: f64,
    pub pareto_weight: f64,
    pub pareto_alpha: f64,
    pub prompt_len_median: f64,
    pub prompt_len_sigma: f64,
    pub prompt_len_max: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cap_ramp: Option<CapRamp>,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        let l = LengthModel::default();
        Self {
            task: TaskMix::Math,
            dataset_size: 4096,
            family: l.family,
            median: None,
            sigma_prompt: l.sigma_prompt,
            sigma_response: l.sigma_response,
            pareto_weight: l.pareto_weight,
            pareto_alpha: l.pareto_alpha,
            prompt_len_median: l.prompt_len_median,
            prompt_len_sigma: l.prompt_len_sigma,
            prompt_len_max: l.prompt_len_max,
            trace: None,
            cap_ramp: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub math_cost: f64,
    pub judge_secs_per_token: f64,
    pub pass_rate: f64,
    /// Sandbox worker cap; 0 means unlimited.
    pub cpu_workers: usize,
    /// Judge replicas on dedicated GPUs when the judge is not colocated.
    pub dedicated_judges: usize,
    pub code: CodeExecModel,
    pub timeout: TimeoutConfig,
    pub judge: JudgeModel,
}

impl Default for RewardConfig {
    fn default() -> Self {
        let c = RewardCostModel::default();
        Self {
            math_cost: c.math_cost,
            judge_secs_per_token: c.judge_secs_per_token,
            pass_rate: c.pass_rate,
            cpu_workers: 0,
            dedicated_judges: 8,
            code: c.code,
            timeout: TimeoutConfig::default(),
            judge: JudgeModel::default(),
        }
    }
}

impl RewardConfig {
    pub fn cost_model(&self) -> RewardCostModel {
        RewardCostModel {
            math_cost: self.math_cost,
            code: self.code.clone(),
            judge_secs_per_token: self.judge_secs_per_token,
            pass_rate: self.pass_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileConfig {
    /// Measured profile CSV; the synthetic generator is used when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticProfile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub run: RunConfig,
    pub cluster: ClusterConfig,
    pub workload: WorkloadConfig,
    pub reward: RewardConfig,
    pub train: TrainConfig,
    pub planner: PlannerConfig,
    pub profile: ProfileConfig,
}

pub const PRESETS: &[&str] = &["14b-16k", "7b-8k", "32b-32k", "code-14b", "judge-14b", "planner-ramp"];

impl Scenario {
    pub fn preset(name: &str) -> Option<Scenario> {
        let mut s = Scenario::default();
        match name {
            "14b-16k" | "default" => {}
            "7b-8k" => {
                s.cluster.model = ModelSize::B7;
                s.cluster.num_nodes = 2;
                s.cluster.tp = TpChoice::Fixed(1);
                s.run.max_response_len = 8192;
                s.train.secs_per_token_gpu = 2.0e-4;
                s.train.replica_gpus = 2;
            }
            "32b-32k" => {
                s.cluster.model = ModelSize::B32;
                s.cluster.num_nodes = 8;
                s.run.max_response_len = 32_768;
                s.train.secs_per_token_gpu = 5.0e-3;
                s.train.replica_gpus = 8;
            }
            "code-14b" => s.workload.task = TaskMix::Code,
            "judge-14b" => s.workload.task = TaskMix::Judge,
            "planner-ramp" => {
                s.cluster.model = ModelSize::B32;
                s.cluster.num_nodes = 2;
                s.cluster.tp = TpChoice::Fixed(1);
                s.run.max_response_len = 32_768;
                s.run.num_steps = 13;
                s.run.toggles = Toggles {
                    planner: true,
                    ..Toggles::NONE
                };
                // Reasoning-length responses: TP=1 runs out of KV memory as
                // the cap grows, which is what the planner reacts to.
                s.workload.median = Some(4000.0);
                s.workload.cap_ramp = Some(CapRamp {
                    start: 8192,
                    end: 32_768,
                    increment: 2048,
                    every: 1,
                });
                s.train.replica_gpus = 8;
            }
            _ => return None,
        }
        Some(s)
    }

    pub fn from_toml_str(text: &str) -> Result<Scenario> {
        let s: Scenario = toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    /// Load a scenario file, or a built-in preset given as `preset:NAME`.
    /// Relative trace/profile paths resolve against the file's directory.
    pub fn load(path_or_preset: &str) -> Result<Scenario> {
        if let Some(name) = path_or_preset.strip_prefix("preset:") {
            return Scenario::preset(name).ok_or_else(|| {
                SimError::Config(format!("unknown preset {name:?}; known: {}", PRESETS.join(", ")))
            });
        }
        let path = Path::new(path_or_preset);
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::Config(format!("{}: {e}", path.display())))?;
        let mut s = Scenario::from_toml_str(&text).map_err(|e| match e {
            SimError::Config(m) => SimError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut s.workload.trace, &mut s.profile.path].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn cap_for_step(&self, step: u32) -> u32 {
        match &self.workload.cap_ramp {
            Some(r) => r
                .end
                .min(r.start.saturating_add(r.increment.saturating_mul(step / r.every.max(1)))),
            None => self.run.max_response_len,
        }
    }

    /// Length model at the reference cap (`run.max_response_len`).
    pub fn length_model(&self) -> LengthModel {
        let w = &self.workload;
        let cap = self.run.max_response_len;
        LengthModel {
            family: w.family,
            median: w.median.unwrap_or(MEDIAN_AT_16K * f64::from(cap) / 16_384.0),
            sigma_prompt: w.sigma_prompt,
            sigma_response: w.sigma_response,
            cap,
            scale: 1.0,
            pareto_weight: w.pareto_weight,
            pareto_alpha: w.pareto_alpha,
            prompt_len_median: w.prompt_len_median,
            prompt_len_sigma: w.prompt_len_sigma,
            prompt_len_max: w.prompt_len_max,
        }
    }

    /// Length model for one step; under a cap ramp lengths scale with the cap.
    pub fn length_model_for_step(&self, step: u32) -> LengthModel {
        let mut m = self.length_model();
        let cap = self.cap_for_step(step);
        m.scale = f64::from(cap) / f64::from(m.cap);
        m.cap = cap;
        m
    }

    /// Throughput profile from file or the model's synthetic defaults.
    pub fn throughput_profile(&self) -> Result<ThroughputProfile> {
        match &self.profile.path {
            Some(p) => ThroughputProfile::load(p),
            None => Ok(self
                .profile
                .synthetic
                .clone()
                .unwrap_or_else(|| self.cluster.model.synthetic_profile())
                .build(self.cluster.gpus_per_node)),
        }
    }

    /// Judge memory reserved on every rollout GPU.
    pub fn judge_reserve_gib(&self) -> f64 {
        if self.colocated_judge() {
            self.reward.judge.reserve_gib
        } else {
            0.0
        }
    }

    pub fn colocated_judge(&self) -> bool {
        self.run.toggles.reward_scheduler && matches!(self.workload.task, TaskMix::Judge | TaskMix::Mixed)
    }

    pub fn max_cap(&self) -> u32 {
        match &self.workload.cap_ramp {
            Some(r) => r.end.max(r.start),
            None => self.run.max_response_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(SimError::InvalidScenario(format!("{key}: {msg}")));
        let r = &self.run;
        if !(r.spec_factor >= 1.0 && r.spec_factor.is_finite()) {
            return bad("run.spec_factor", &format!("η ≥ 1 required, got {}", r.spec_factor));
        }
        if r.prompts_per_step == 0 {
            return bad("run.prompts_per_step", "P₀ ≥ 1 required");
        }
        if r.responses_per_prompt == 0 {
            return bad("run.responses_per_prompt", "R₀ ≥ 1 required");
        }
        if r.max_response_len == 0 {
            return bad("run.max_response_len", "must be >= 1");
        }
        if !(r.tick > 0.0 && r.tick.is_finite()) {
            return bad("run.tick", "must be > 0");
        }
        if !(r.weight_sync_cost >= 0.0) {
            return bad("run.weight_sync_cost", "must be >= 0");
        }
        if self.workload.dataset_size == 0 && self.workload.trace.is_none() {
            return bad("workload.dataset_size", "must be >= 1");
        }
        if let Some(ramp) = &self.workload.cap_ramp {
            if ramp.start == 0 || ramp.end == 0 || ramp.end > r.max_response_len {
                return bad("workload.cap_ramp", "caps must be in [1, run.max_response_len]");
            }
        }
        self.length_model().validate()?;
        self.reward.cost_model().validate()?;
        self.reward.judge.validate()?;
        let t = &self.reward.timeout;
        if !(t.lambda > 0.0 && t.t_min >= 0.0 && t.t_min <= t.t_max) {
            return bad("reward.timeout", "need lambda > 0 and 0 <= t_min <= t_max");
        }
        self.train.validate()?;
        if !(self.planner.rise_threshold >= 1.0) || self.planner.zero_window == 0 {
            return bad("planner", "rise_threshold must be >= 1 and zero_window >= 1");
        }
        let spec = self.cluster.spec();
        spec.validate()?;
        let profile = self.throughput_profile()?;
        if let TpChoice::Fixed(tp) = self.cluster.tp {
            if !tp.is_power_of_two() || self.cluster.gpus_per_node % tp != 0 {
                return bad("cluster.tp", "must be a power of two dividing gpus_per_node");
            }
            if !profile.has_tp(tp) {
                return bad("cluster.tp", "missing from the throughput profile");
            }
            let need = u64::from(self.max_cap()) + u64::from(self.workload.prompt_len_max);
            let have = spec.kv_capacity(tp, self.judge_reserve_gib());
            if have < need {
                return Err(SimError::InvalidScenario(format!(
                    "cluster.tp: instance KV capacity {have} tokens cannot hold one full-length request ({need})"
                )));
            }
            let instances = (spec.total_gpus() / tp) as usize;
            let rollout = r.rollout();
            let per_round = rollout.speculative_prompts().max(r.prompts_per_step)
                * rollout.speculative_responses().max(r.responses_per_prompt);
            if per_round > r.max_requests_per_instance * instances {
                return bad(
                    "run.max_requests_per_instance",
                    "P₀·R₀ exceeds the concurrent request limit of the cluster",
                );
            }
        }
        if self.colocated_judge() {
            let per_gpu = spec.gpu_mem_gib * spec.mem_utilization;
            if self.reward.judge.reserve_gib >= per_gpu {
                return bad("reward.judge.reserve_gib", "exceeds usable GPU memory");
            }
        }
        Ok(())
    }
}
