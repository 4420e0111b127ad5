//! Per-step metrics rows, their CSV form, and plain-text summaries.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::rollout::RoundKind;

pub const SCHEMA_LINE: &str = "# schema: tailsim-metrics v1";

/// One training step. Times are virtual seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u32,
    pub round_kind: RoundKind,
    pub start_s: f64,
    pub rollout_s: f64,
    pub reward_hidden_s: f64,
    pub reward_exposed_s: f64,
    pub train_s: f64,
    pub total_s: f64,
    pub max_resp_len: u32,
    pub tp: u32,
    pub preempts: u64,
    pub queue_depth: usize,
    pub deferrals: usize,
    pub scaled_at: Option<f64>,
    pub migration_s: f64,
    pub reconfig_s: f64,
    pub retained: usize,
    pub reward_hidden_fraction: f64,
    pub sandbox_timeouts: u32,
    pub sandbox_cpu_s: f64,
    pub mean_judge_latency: f64,
    pub resident_layers: f64,
    pub migrated_requests: usize,
    pub streamed_samples: usize,
    pub finalize_s: f64,
    pub synthetic_profile: bool,
}

pub fn write_csv<W: Write>(out: W, rows: &[StepReport]) -> Result<()> {
    let mut out = out;
    writeln!(out, "{SCHEMA_LINE}")?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

const HEADER: &[&str] = &[
    "step",
    "round_kind",
    "start_s",
    "rollout_s",
    "reward_hidden_s",
    "reward_exposed_s",
    "train_s",
    "total_s",
    "max_resp_len",
    "tp",
    "preempts",
    "queue_depth",
    "deferrals",
    "scaled_at",
    "migration_s",
    "reconfig_s",
    "retained",
    "reward_hidden_fraction",
    "sandbox_timeouts",
    "sandbox_cpu_s",
    "mean_judge_latency",
    "resident_layers",
    "migrated_requests",
    "streamed_samples",
    "finalize_s",
    "synthetic_profile",
];

pub fn write_csv_file(path: &Path, rows: &[StepReport]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_csv(std::io::BufWriter::new(std::fs::File::create(path)?), rows)
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<StepReport>> {
    let mut text = String::new();
    for line in BufReader::new(input).lines() {
        let line = line?;
        if !line.starts_with('#') {
            text.push_str(&line);
            text.push('\n');
        }
    }
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers()?.clone();
    if headers.iter().ne(HEADER.iter().copied()) {
        return Err(SimError::Config("metrics CSV header does not match schema v1".into()));
    }
    r.deserialize().map(|row| row.map_err(SimError::from)).collect()
}

pub fn read_csv_file(path: &Path) -> Result<Vec<StepReport>> {
    read_csv(std::fs::File::open(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KindStats {
    pub steps: usize,
    pub mean_rollout_s: f64,
    pub mean_total_s: f64,
    pub mean_max_len: f64,
    pub mean_preempts: f64,
}

fn kind_stats<'a>(rows: impl Iterator<Item = &'a StepReport>) -> KindStats {
    let rows: Vec<&StepReport> = rows.collect();
    let n = rows.len();
    if n == 0 {
        return KindStats::default();
    }
    let mean = |f: &dyn Fn(&StepReport) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n as f64;
    KindStats {
        steps: n,
        mean_rollout_s: mean(&|r| r.rollout_s),
        mean_total_s: mean(&|r| r.total_s),
        mean_max_len: mean(&|r| f64::from(r.max_resp_len)),
        mean_preempts: mean(&|r| r.preempts as f64),
    }
}

pub fn stats_for(rows: &[StepReport], kind: RoundKind) -> KindStats {
    kind_stats(rows.iter().filter(|r| r.round_kind == kind))
}

pub fn total_time(rows: &[StepReport]) -> f64 {
    rows.iter().map(|r| r.total_s).sum()
}

/// Plain-text summary with a breakdown by round kind.
pub fn summarize(rows: &[StepReport]) -> String {
    let mut s = String::new();
    let all = kind_stats(rows.iter());
    let _ = writeln!(s, "steps: {}", rows.len());
    if rows.first().is_some_and(|r| r.synthetic_profile) {
        let _ = writeln!(s, "throughput profile: synthetic (not measured)");
    }
    let _ = writeln!(s, "total time: {:.1} s", total_time(rows));
    let _ = writeln!(s, "mean step: {:.1} s (rollout {:.1} s)", all.mean_total_s, all.mean_rollout_s);
    let _ = writeln!(
        s,
        "{:<9} {:>5} {:>11} {:>10} {:>9} {:>9}",
        "round", "steps", "rollout_s", "total_s", "max_len", "preempts"
    );
    for kind in [RoundKind::Short, RoundKind::Long, RoundKind::Baseline] {
        let k = stats_for(rows, kind);
        if k.steps == 0 {
            continue;
        }
        let _ = writeln!(
            s,
            "{:<9} {:>5} {:>11.1} {:>10.1} {:>9.0} {:>9.1}",
            kind.to_string(),
            k.steps,
            k.mean_rollout_s,
            k.mean_total_s,
            k.mean_max_len,
            k.mean_preempts
        );
    }
    let exposed: f64 = rows.iter().map(|r| r.reward_exposed_s).sum();
    let train: f64 = rows.iter().map(|r| r.train_s).sum();
    let _ = writeln!(s, "reward exposed: {exposed:.1} s, train exposed: {train:.1} s");
    let scaled = rows.iter().filter(|r| r.scaled_at.is_some()).count();
    if scaled > 0 {
        let mig = rows.iter().map(|r| r.migration_s).fold(0.0, f64::max);
        let _ = writeln!(s, "scale-downs: {scaled}, max migration: {mig:.2} s");
    }
    s
}
