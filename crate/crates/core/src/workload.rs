//! Prompt populations and the response-length / reward-cost models.
//!
//! Response lengths follow a two-level log-normal: each prompt carries a
//! latent difficulty `mu_p ~ Normal(ln median, sigma_prompt)` and each of its
//! responses draws `exp(mu_p + sigma_response * Z)`, clamped to `[1, cap]`.
//! The shared `mu_p` is what makes a prompt's responses long or short
//! together, which is the property tail batching exploits.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal, Pareto};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

use crate::error::{Result, SimError};
use crate::rng::{rng_for, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PromptId(pub u32);

impl fmt::Display for PromptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Math,
    Code,
    Judge,
}

impl Task {
    pub fn parse(s: &str) -> Option<Task> {
        match s.trim().to_ascii_lowercase().as_str() {
            "math" => Some(Task::Math),
            "code" => Some(Task::Code),
            "judge" => Some(Task::Judge),
            _ => None,
        }
    }
}

/// Task composition of a generated population.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMix {
    Math,
    Code,
    Judge,
    /// Uniform mix of the three tasks.
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EpochState {
    Fresh,
    Deferred,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub id: PromptId,
    pub task: Task,
    pub prompt_len: u32,
    /// Latent log-length location of this prompt's responses.
    pub difficulty: f64,
    pub state: EpochState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthFamily {
    LogNormal,
    /// Log-normal body with a Pareto multiplier applied to a fraction of draws.
    ParetoMixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LengthModel {
    pub family: LengthFamily,
    /// Population median response length in tokens (before clamping).
    pub median: f64,
    pub sigma_prompt: f64,
    pub sigma_response: f64,
    pub cap: u32,
    /// Multiplier applied on top of `median`; used for length-growth schedules.
    pub scale: f64,
    pub pareto_weight: f64,
    pub pareto_alpha: f64,
    pub prompt_len_median: f64,
    pub prompt_len_sigma: f64,
    pub prompt_len_max: u32,
}

/// Reference median at the 16k cap; fitted by [`calibrate_lengths`] against a
/// P75 of ~900 tokens and a max/median ratio of ~31 over 10^4 draws.
pub const MEDIAN_AT_16K: f64 = 491.6;
pub const SIGMA_PROMPT: f64 = 0.60;
pub const SIGMA_RESPONSE: f64 = 0.665;

impl Default for LengthModel {
    fn default() -> Self {
        Self::for_cap(16_384)
    }
}

impl LengthModel {
    /// Default calibration with the median scaled proportionally to `cap`.
    pub fn for_cap(cap: u32) -> Self {
        Self {
            family: LengthFamily::LogNormal,
            median: MEDIAN_AT_16K * f64::from(cap) / 16_384.0,
            sigma_prompt: SIGMA_PROMPT,
            sigma_response: SIGMA_RESPONSE,
            cap,
            scale: 1.0,
            pareto_weight: 0.02,
            pareto_alpha: 1.5,
            prompt_len_median: 256.0,
            prompt_len_sigma: 0.5,
            prompt_len_max: 2048,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SimError::InvalidLengthModel(m.to_string()));
        if !(self.median.is_finite() && self.median > 0.0) {
            return bad("median must be positive");
        }
        if !(self.sigma_prompt > 0.0 && self.sigma_prompt.is_finite()) {
            return bad("sigma_prompt must be > 0");
        }
        if !(self.sigma_response >= 0.0 && self.sigma_response.is_finite()) {
            return bad("sigma_response must be >= 0");
        }
        if self.cap == 0 {
            return bad("cap must be >= 1");
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return bad("scale must be > 0");
        }
        if !(0.0..=1.0).contains(&self.pareto_weight) || self.pareto_alpha <= 0.0 {
            return bad("pareto parameters out of range");
        }
        if !(self.prompt_len_median >= 1.0) || self.prompt_len_sigma < 0.0 || self.prompt_len_max == 0 {
            return bad("prompt length parameters out of range");
        }
        Ok(())
    }

    fn location(&self) -> f64 {
        self.median.ln()
    }
}

/// Draw `n` fresh prompts.
pub fn generate_population(
    n: usize,
    model: &LengthModel,
    mix: TaskMix,
    rng: &mut SimRng,
) -> Result<Vec<PromptRecord>> {
    if n == 0 {
        return Err(SimError::InvalidLengthModel("population size must be >= 1".into()));
    }
    model.validate()?;
    let difficulty = Normal::new(model.location(), model.sigma_prompt)
        .map_err(|e| SimError::InvalidLengthModel(e.to_string()))?;
    let plen = LogNormal::new(model.prompt_len_median.ln(), model.prompt_len_sigma.max(1e-9))
        .map_err(|e| SimError::InvalidLengthModel(e.to_string()))?;
    let tasks = [Task::Math, Task::Code, Task::Judge];
    Ok((0..n)
        .map(|i| {
            let task = match mix {
                TaskMix::Math => Task::Math,
                TaskMix::Code => Task::Code,
                TaskMix::Judge => Task::Judge,
                TaskMix::Mixed => tasks[rng.random_range(0..3)],
            };
            let prompt_len = (plen.sample(rng).round() as u32).clamp(16, model.prompt_len_max);
            PromptRecord {
                id: PromptId(i as u32),
                task,
                prompt_len,
                difficulty: difficulty.sample(rng),
                state: EpochState::Fresh,
            }
        })
        .collect())
}

/// Draw one response length for `prompt`, clamped to `[1, cap]`.
pub fn sample_response_length(prompt: &PromptRecord, model: &LengthModel, rng: &mut SimRng) -> u32 {
    let mut log_len = prompt.difficulty + model.scale.ln();
    if model.sigma_response > 0.0 {
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        log_len += model.sigma_response * z;
    }
    let mut len = log_len.exp();
    if model.family == LengthFamily::ParetoMixture && rng.random::<f64>() < model.pareto_weight {
        let tail = Pareto::new(1.0, model.pareto_alpha).expect("validated pareto alpha");
        len *= tail.sample(rng);
    }
    clamp_len(len, model.cap)
}

fn clamp_len(len: f64, cap: u32) -> u32 {
    if !len.is_finite() || len >= f64::from(cap) {
        cap
    } else {
        (len.round() as u32).clamp(1, cap)
    }
}

// ── Reward cost ─────────────────────────────────────────────────────────────

/// Execution time of generated code in the sandbox: `shift + LogNormal`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodeExecModel {
    pub shift: f64,
    pub median: f64,
    pub sigma: f64,
    /// Probability that a program finishing within `fast_limit` is correct.
    pub pass_rate: f64,
    /// Programs running longer than this are never correct.
    pub fast_limit: f64,
    /// Share of log-time variance that comes from the prompt's test cases,
    /// so slow prompts are slow for all of their responses.
    pub prompt_share: f64,
}

impl CodeExecModel {
    /// Choose `sigma` so that `P(exec > timeout) = tail`.
    pub fn calibrated(shift: f64, median: f64, timeout: f64, tail: f64) -> Self {
        let z = StdNormal::new(0.0, 1.0).unwrap().inverse_cdf(1.0 - tail);
        Self {
            shift,
            median,
            sigma: ((timeout - shift) / median).ln() / z,
            pass_rate: 0.6,
            fast_limit: 5.0,
            prompt_share: 0.0,
        }
    }

    pub fn tail_fraction(&self, threshold: f64) -> f64 {
        if threshold <= self.shift {
            return 1.0;
        }
        let z = ((threshold - self.shift) / self.median).ln() / self.sigma;
        1.0 - StdNormal::new(0.0, 1.0).unwrap().cdf(z)
    }
}

impl Default for CodeExecModel {
    fn default() -> Self {
        Self::calibrated(0.3, 1.2, 30.0, 0.05)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardCostModel {
    /// Rule-based math checker cost per response.
    pub math_cost: f64,
    pub code: CodeExecModel,
    /// Dedicated judge latency per response token.
    pub judge_secs_per_token: f64,
    /// Probability a math or judge response is scored as correct.
    pub pass_rate: f64,
}

impl Default for RewardCostModel {
    fn default() -> Self {
        Self {
            math_cost: 0.05,
            code: CodeExecModel::default(),
            judge_secs_per_token: 5.0e-5,
            pass_rate: 0.6,
        }
    }
}

impl RewardCostModel {
    pub fn validate(&self) -> Result<()> {
        let ok = self.math_cost >= 0.0
            && self.judge_secs_per_token >= 0.0
            && self.code.shift >= 0.0
            && self.code.median > 0.0
            && self.code.sigma > 0.0
            && (0.0..=1.0).contains(&self.pass_rate)
            && (0.0..=1.0).contains(&self.code.pass_rate)
            && (0.0..=1.0).contains(&self.code.prompt_share);
        if ok {
            Ok(())
        } else {
            Err(SimError::InvalidScenario("reward cost parameters out of range".into()))
        }
    }
}

/// Cost and correctness of evaluating one response.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardDraw {
    /// Seconds of work. For code this is the untruncated execution time.
    pub cost: f64,
    pub correct: bool,
}

pub fn sample_reward_draw(
    task: Task,
    response_len: u32,
    prompt_z: f64,
    model: &RewardCostModel,
    rng: &mut SimRng,
) -> Result<RewardDraw> {
    if response_len == 0 {
        return Err(SimError::InvalidScenario("response_len must be >= 1".into()));
    }
    Ok(match task {
        Task::Math => RewardDraw {
            cost: model.math_cost,
            correct: rng.random::<f64>() < model.pass_rate,
        },
        Task::Code => {
            let c = &model.code;
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            let z = c.prompt_share.sqrt() * prompt_z + (1.0 - c.prompt_share).sqrt() * z;
            let exec = c.shift + c.median * (c.sigma * z).exp();
            let correct = exec <= c.fast_limit && rng.random::<f64>() < c.pass_rate;
            RewardDraw { cost: exec, correct }
        }
        Task::Judge => RewardDraw {
            cost: model.judge_secs_per_token * f64::from(response_len),
            correct: rng.random::<f64>() < model.pass_rate,
        },
    })
}

pub fn sample_reward_cost(
    task: Task,
    response_len: u32,
    model: &RewardCostModel,
    rng: &mut SimRng,
) -> Result<f64> {
    let prompt_z: f64 = rng.sample(rand_distr::StandardNormal);
    sample_reward_draw(task, response_len, prompt_z, model, rng).map(|d| d.cost)
}

// ── Traces ──────────────────────────────────────────────────────────────────

/// A recorded population with per-prompt response lengths replayed in order.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub prompts: Vec<PromptRecord>,
    pub names: Vec<String>,
    pub lengths: Vec<Vec<u32>>,
}

impl Trace {
    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    /// The `k`-th recorded length of prompt `id`, cycling when exhausted.
    pub fn length(&self, id: PromptId, k: usize) -> u32 {
        let lens = &self.lengths[id.0 as usize];
        lens[k % lens.len()]
    }
}

/// Stateful replay cursor over a trace.
#[derive(Debug, Clone)]
pub struct TraceReplay<'a> {
    trace: &'a Trace,
    cursor: Vec<usize>,
}

impl<'a> TraceReplay<'a> {
    pub fn new(trace: &'a Trace) -> Self {
        Self {
            trace,
            cursor: vec![0; trace.prompts.len()],
        }
    }

    pub fn next_length(&mut self, id: PromptId) -> u32 {
        let c = &mut self.cursor[id.0 as usize];
        let len = self.trace.length(id, *c);
        *c += 1;
        len
    }
}

pub fn parse_trace(text: &str, cap: u32) -> Result<Trace> {
    let mut trace = Trace::default();
    let mut seen = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| SimError::TraceParse { line: line_no, msg };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", fields.len())));
        }
        let name = fields[0];
        if name.is_empty() {
            return Err(err("empty prompt id".into()));
        }
        if seen.insert(name.to_string(), ()).is_some() {
            return Err(err(format!("duplicate prompt id {name}")));
        }
        let task = Task::parse(fields[1]).ok_or_else(|| err(format!("unknown task {:?}", fields[1])))?;
        let prompt_len: u32 = fields[2]
            .parse()
            .map_err(|_| err(format!("bad prompt_len {:?}", fields[2])))?;
        let mut lens = Vec::new();
        for tok in fields[3].split(';') {
            let len: u32 = tok
                .trim()
                .parse()
                .map_err(|_| err(format!("bad length {tok:?}")))?;
            if len == 0 {
                return Err(err("length must be >= 1".into()));
            }
            if len > cap {
                return Err(err(format!("length {len} exceeds cap {cap}")));
            }
            lens.push(len);
        }
        let mean = lens.iter().map(|&l| f64::from(l)).sum::<f64>() / lens.len() as f64;
        trace.prompts.push(PromptRecord {
            id: PromptId(trace.prompts.len() as u32),
            task,
            prompt_len,
            difficulty: mean.ln(),
            state: EpochState::Fresh,
        });
        trace.names.push(name.to_string());
        trace.lengths.push(lens);
    }
    Ok(trace)
}

pub fn load_trace(path: &Path, cap: u32) -> Result<Trace> {
    let text = std::fs::read_to_string(path)?;
    parse_trace(&text, cap)
}

// ── Epoch iteration ─────────────────────────────────────────────────────────

/// Shuffled pass over a fixed population, one epoch at a time.
#[derive(Debug, Clone)]
pub struct PromptSource {
    population: Vec<PromptRecord>,
    order: Vec<usize>,
    cursor: usize,
    epoch: u32,
    seed: u64,
}

impl PromptSource {
    pub fn new(population: Vec<PromptRecord>, seed: u64) -> Self {
        let mut src = Self {
            population,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
            seed,
        };
        src.shuffle();
        src
    }

    fn shuffle(&mut self) {
        self.order = (0..self.population.len()).collect();
        let mut rng = rng_for("epoch-order", self.seed, &[u64::from(self.epoch)]);
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn remaining(&self) -> usize {
        self.order.len() - self.cursor
    }

    pub fn population(&self) -> &[PromptRecord] {
        &self.population
    }

    pub fn prompt(&self, id: PromptId) -> &PromptRecord {
        &self.population[id.0 as usize]
    }

    /// Draw up to `n` fresh prompts from the current epoch.
    pub fn draw(&mut self, n: usize) -> Vec<PromptRecord> {
        let take = n.min(self.remaining());
        let out = self.order[self.cursor..self.cursor + take]
            .iter()
            .map(|&i| {
                let mut p = self.population[i].clone();
                p.state = EpochState::Fresh;
                p
            })
            .collect();
        self.cursor += take;
        out
    }

    pub fn next_epoch(&mut self) {
        self.epoch += 1;
        self.shuffle();
    }
}

// ── Calibration ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LengthTargets {
    pub p75: f64,
    pub max_over_median: f64,
    pub n: usize,
    /// Share of log-length variance attributed to the prompt.
    pub prompt_share: f64,
}

impl Default for LengthTargets {
    fn default() -> Self {
        Self {
            p75: 900.0,
            max_over_median: 31.0,
            n: 10_000,
            prompt_share: 0.45,
        }
    }
}

impl LengthTargets {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))
    }
}

/// Fit median and spreads so that a sample of `n` independent draws has the
/// requested P75 and expected max/median ratio. Solves for the total log
/// spread by bisection on the expected-maximum z-score.
pub fn calibrate_lengths(targets: &LengthTargets, cap: u32) -> Result<LengthModel> {
    if targets.p75 <= 0.0 || targets.max_over_median <= 1.0 || targets.n < 2 {
        return Err(SimError::InvalidLengthModel("calibration targets out of range".into()));
    }
    if !(0.0..1.0).contains(&targets.prompt_share) || targets.prompt_share == 0.0 {
        return Err(SimError::InvalidLengthModel("prompt_share must be in (0, 1)".into()));
    }
    let std = StdNormal::new(0.0, 1.0).unwrap();
    let n = targets.n as f64;
    // Blom's approximation of the expected largest order statistic.
    let z_max = std.inverse_cdf((n - 0.375) / (n + 0.25));
    let target = targets.max_over_median.ln();
    let (mut lo, mut hi) = (1e-6_f64, 10.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if z_max * mid < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let sigma = 0.5 * (lo + hi);
    let z75 = std.inverse_cdf(0.75);
    let median = targets.p75 / (z75 * sigma).exp();
    let mut model = LengthModel::for_cap(cap);
    model.median = median;
    model.sigma_prompt = sigma * targets.prompt_share.sqrt();
    model.sigma_response = sigma * (1.0 - targets.prompt_share).sqrt();
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_stream;

    fn quantile(sorted: &[u32], q: f64) -> f64 {
        let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
        f64::from(sorted[idx])
    }

    fn one_draw_per_prompt(n: usize, seed: u64) -> Vec<u32> {
        let model = LengthModel::default();
        let mut rng = rng_stream("pop", seed);
        let pop = generate_population(n, &model, TaskMix::Math, &mut rng).unwrap();
        let mut lens: Vec<u32> = pop
            .iter()
            .map(|p| sample_response_length(p, &model, &mut rng))
            .collect();
        lens.sort_unstable();
        lens
    }

    #[test]
    fn single_prompt_population() {
        let mut rng = rng_stream("pop", 1);
        let pop = generate_population(1, &LengthModel::default(), TaskMix::Code, &mut rng).unwrap();
        assert_eq!(pop.len(), 1);
        assert_eq!(pop[0].state, EpochState::Fresh);
        assert_eq!(pop[0].task, Task::Code);
    }

    #[test]
    fn zero_population_rejected() {
        let mut rng = rng_stream("pop", 1);
        assert!(generate_population(0, &LengthModel::default(), TaskMix::Math, &mut rng).is_err());
    }

    #[test]
    fn invalid_model_rejected() {
        let mut m = LengthModel::default();
        m.sigma_prompt = 0.0;
        assert!(m.validate().is_err());
        let mut m = LengthModel::default();
        m.cap = 0;
        assert!(m.validate().is_err());
    }

    #[test]
    fn default_p75_in_calibration_band() {
        for seed in 0..3 {
            let lens = one_draw_per_prompt(10_000, seed);
            let p75 = quantile(&lens, 0.75);
            assert!((700.0..=1200.0).contains(&p75), "seed {seed}: p75 {p75}");
        }
    }

    #[test]
    fn default_max_over_median_in_band() {
        for seed in 0..5 {
            let lens = one_draw_per_prompt(10_000, seed);
            let ratio = f64::from(*lens.last().unwrap()) / quantile(&lens, 0.5);
            assert!((20.0..=40.0).contains(&ratio), "seed {seed}: ratio {ratio}");
        }
    }

    #[test]
    fn degenerate_response_spread_returns_location() {
        let mut model = LengthModel::default();
        model.sigma_response = 0.0;
        let p = PromptRecord {
            id: PromptId(0),
            task: Task::Math,
            prompt_len: 100,
            difficulty: 700f64.ln(),
            state: EpochState::Fresh,
        };
        let mut rng = rng_stream("x", 0);
        for _ in 0..10 {
            assert_eq!(sample_response_length(&p, &model, &mut rng), 700);
        }
        let huge = PromptRecord {
            difficulty: 1e6f64.ln(),
            ..p
        };
        assert_eq!(sample_response_length(&huge, &model, &mut rng), model.cap);
    }

    #[test]
    fn extreme_prompt_clamps_to_cap() {
        let model = LengthModel::default();
        let z999 = 3.090_232;
        let p = PromptRecord {
            id: PromptId(0),
            task: Task::Math,
            prompt_len: 100,
            difficulty: model.median.ln() + z999 * model.sigma_prompt + 2.5,
            state: EpochState::Fresh,
        };
        let mut rng = rng_stream("x", 1);
        let draws: Vec<u32> = (0..1000).map(|_| sample_response_length(&p, &model, &mut rng)).collect();
        assert!(draws.iter().all(|&l| l <= model.cap && l >= 1));
        let at_cap = draws.iter().filter(|&&l| l == model.cap).count();
        assert!(at_cap > 500, "at_cap {at_cap}");
    }

    // Monte Carlo oracle: prompts whose difficulty differs by 2 sigma_prompt
    // should have ordered mean lengths in nearly every trial.
    #[test]
    fn difficulty_orders_mean_lengths() {
        let model = LengthModel::default();
        let base = model.median.ln();
        let easy = PromptRecord {
            id: PromptId(0),
            task: Task::Math,
            prompt_len: 100,
            difficulty: base - model.sigma_prompt,
            state: EpochState::Fresh,
        };
        let hard = PromptRecord {
            id: PromptId(1),
            difficulty: base + model.sigma_prompt,
            ..easy.clone()
        };
        let mut rng = rng_stream("mc", 3);
        let mean = |p: &PromptRecord, rng: &mut SimRng| {
            (0..8).map(|_| f64::from(sample_response_length(p, &model, rng))).sum::<f64>() / 8.0
        };
        let ordered = (0..1000).filter(|_| mean(&hard, &mut rng) > mean(&easy, &mut rng)).count();
        assert!(ordered >= 950, "ordered {ordered}/1000");
    }

    fn ranks(xs: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..xs.len()).collect();
        idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
        let mut r = vec![0.0; xs.len()];
        for (rank, &i) in idx.iter().enumerate() {
            r[i] = rank as f64;
        }
        r
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn per_prompt_lengths_persist_across_draws() {
        let model = LengthModel::default();
        let mut rng = rng_stream("persist", 9);
        let pop = generate_population(1000, &model, TaskMix::Math, &mut rng).unwrap();
        let mut mean = |p: &PromptRecord| {
            (0..8).map(|_| f64::from(sample_response_length(p, &model, &mut rng))).sum::<f64>() / 8.0
        };
        let a: Vec<f64> = pop.iter().map(&mut mean).collect();
        let b: Vec<f64> = pop.iter().map(&mut mean).collect();
        let rho = pearson(&ranks(&a), &ranks(&b));
        assert!(rho >= 0.5, "spearman {rho}");
    }

    #[test]
    fn batch_max_over_median_is_long_tailed() {
        let model = LengthModel::default();
        let mut ok = 0;
        for seed in 0..50 {
            let mut rng = rng_stream("batch", seed);
            let pop = generate_population(128, &model, TaskMix::Math, &mut rng).unwrap();
            let mut lens: Vec<u32> = pop
                .iter()
                .flat_map(|p| (0..8).map(|_| sample_response_length(p, &model, &mut rng)).collect::<Vec<_>>())
                .collect();
            lens.sort_unstable();
            let ratio = f64::from(*lens.last().unwrap()) / quantile(&lens, 0.5);
            if ratio >= 10.0 {
                ok += 1;
            }
        }
        assert!(ok >= 45, "{ok}/50 seeds long-tailed");
    }

    #[test]
    fn pareto_mixture_stays_clamped() {
        let mut model = LengthModel::default();
        model.family = LengthFamily::ParetoMixture;
        model.pareto_weight = 0.5;
        let mut rng = rng_stream("pm", 0);
        let pop = generate_population(200, &model, TaskMix::Math, &mut rng).unwrap();
        for p in &pop {
            let l = sample_response_length(p, &model, &mut rng);
            assert!((1..=model.cap).contains(&l));
        }
    }

    #[test]
    fn math_reward_is_fixed() {
        let mut rng = rng_stream("r", 0);
        let m = RewardCostModel::default();
        assert_eq!(sample_reward_cost(Task::Math, 500, &m, &mut rng).unwrap(), 0.05);
    }

    #[test]
    fn code_timeout_fraction_near_five_percent() {
        let m = RewardCostModel::default();
        let mut rng = rng_stream("code", 4);
        let n = 100_000;
        let over = (0..n)
            .filter(|_| sample_reward_cost(Task::Code, 100, &m, &mut rng).unwrap() > 30.0)
            .count();
        let frac = over as f64 / n as f64;
        assert!((0.03..=0.07).contains(&frac), "frac {frac}");
        assert!((m.code.tail_fraction(30.0) - 0.05).abs() < 1e-9);
    }

    #[test]
    fn judge_cost_linear_and_rejects_zero() {
        let m = RewardCostModel::default();
        let mut rng = rng_stream("j", 0);
        assert_eq!(sample_reward_cost(Task::Judge, 1, &m, &mut rng).unwrap(), m.judge_secs_per_token);
        assert!(sample_reward_cost(Task::Judge, 0, &m, &mut rng).is_err());
    }

    #[test]
    fn empty_trace() {
        let t = parse_trace("", 100).unwrap();
        assert!(t.is_empty());
        let t = parse_trace("# only a comment\n\n", 100).unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn single_line_trace_echoes_length() {
        let t = parse_trace("p1,math,120,843", 16_384).unwrap();
        assert_eq!(t.prompts.len(), 1);
        assert_eq!(t.prompts[0].task, Task::Math);
        assert_eq!(t.prompts[0].prompt_len, 120);
        assert_eq!(t.names[0], "p1");
        let mut replay = TraceReplay::new(&t);
        assert_eq!(replay.next_length(PromptId(0)), 843);
    }

    #[test]
    fn trace_replays_recorded_lengths() {
        let mut text = String::from("# id,task,prompt_len,lengths\n");
        let mut expected = Vec::new();
        for p in 0..5u32 {
            let lens: Vec<u32> = (0..8).map(|k| 100 + p * 10 + k).collect();
            expected.push(lens.clone());
            let joined: Vec<String> = lens.iter().map(u32::to_string).collect();
            text.push_str(&format!("q{p},code,50,{}\n", joined.join(";")));
        }
        let t = parse_trace(&text, 1000).unwrap();
        let mut replay = TraceReplay::new(&t);
        for (p, lens) in expected.iter().enumerate() {
            let got: Vec<u32> = (0..8).map(|_| replay.next_length(PromptId(p as u32))).collect();
            assert_eq!(&got, lens);
        }
    }

    #[test]
    fn trace_errors_carry_line_numbers() {
        let e = parse_trace("p1,math,120,843\np2,math,x,1", 1000).unwrap_err();
        assert!(matches!(e, SimError::TraceParse { line: 2, .. }), "{e}");
        let e = parse_trace("p1,math,120,2000", 1000).unwrap_err();
        assert!(matches!(e, SimError::TraceParse { line: 1, .. }));
        let e = parse_trace("p1,poetry,120,10", 1000).unwrap_err();
        assert!(matches!(e, SimError::TraceParse { line: 1, .. }));
    }

    #[test]
    fn prompt_source_covers_epoch_once() {
        let mut rng = rng_stream("pop", 2);
        let pop = generate_population(50, &LengthModel::default(), TaskMix::Mixed, &mut rng).unwrap();
        let mut src = PromptSource::new(pop, 2);
        let mut seen: Vec<u32> = Vec::new();
        while src.remaining() > 0 {
            seen.extend(src.draw(7).iter().map(|p| p.id.0));
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..50).collect::<Vec<_>>());
        src.next_epoch();
        assert_eq!(src.remaining(), 50);
    }

    #[test]
    fn calibration_recovers_defaults() {
        let m = calibrate_lengths(&LengthTargets::default(), 16_384).unwrap();
        assert!((m.median - MEDIAN_AT_16K).abs() / MEDIAN_AT_16K < 0.02, "median {}", m.median);
        let total = (m.sigma_prompt.powi(2) + m.sigma_response.powi(2)).sqrt();
        let default_total = (SIGMA_PROMPT.powi(2) + SIGMA_RESPONSE.powi(2)).sqrt();
        assert!((total - default_total).abs() < 0.01, "sigma {total}");
    }
}
