//! Decode/prefill throughput tables indexed by TP size and concurrent batch.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub batch: f64,
    /// Aggregate decode tokens/s of one instance at this batch.
    pub decode_tps: f64,
    pub prefill_tps: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ThroughputProfile {
    rows: BTreeMap<u32, Vec<ProfilePoint>>,
    /// True when generated rather than measured.
    pub synthetic: bool,
}

/// Parameters of the built-in synthetic profile: per-request decode speed is
/// flat until `knee_per_gpu * tp` concurrent sequences, after which aggregate
/// throughput grows with the square root of batch. Every TP doubling costs
/// `tp_tax` of throughput.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticProfile {
    pub single_stream_tps: f64,
    pub prefill_tps_per_gpu: f64,
    pub knee_per_gpu: f64,
    pub tp_tax: f64,
    pub max_batch: u32,
}

impl Default for SyntheticProfile {
    fn default() -> Self {
        Self {
            single_stream_tps: 50.0,
            prefill_tps_per_gpu: 20_000.0,
            knee_per_gpu: 48.0,
            tp_tax: 0.10,
            max_batch: 8192,
        }
    }
}

impl SyntheticProfile {
    pub fn tax(&self, tp: u32) -> f64 {
        (1.0 - self.tp_tax).powf(f64::from(tp).log2())
    }

    /// Closed-form aggregate decode throughput.
    pub fn decode_tps(&self, tp: u32, batch: f64) -> f64 {
        let knee = self.knee_per_gpu * f64::from(tp);
        let eff = if batch <= knee { batch } else { (knee * batch).sqrt() };
        self.single_stream_tps * self.tax(tp) * eff
    }

    pub fn prefill_tps(&self, tp: u32) -> f64 {
        self.prefill_tps_per_gpu * f64::from(tp) * self.tax(tp)
    }

    pub fn build(&self, gpus_per_node: u32) -> ThroughputProfile {
        let mut rows = BTreeMap::new();
        let mut tp = 1;
        while tp <= gpus_per_node {
            let knee = self.knee_per_gpu * f64::from(tp);
            let mut batches: Vec<f64> = Vec::new();
            let mut b = 1u32;
            while b <= self.max_batch {
                batches.push(f64::from(b));
                b *= 2;
            }
            // Dense sampling past the knee keeps interpolation error of the
            // square-root segment well below 1%.
            let mut x = knee;
            while x < f64::from(self.max_batch) {
                batches.push(x);
                x *= 1.25;
            }
            batches.sort_by(f64::total_cmp);
            batches.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
            let points = batches
                .into_iter()
                .map(|batch| ProfilePoint {
                    batch,
                    decode_tps: self.decode_tps(tp, batch),
                    prefill_tps: self.prefill_tps(tp),
                })
                .collect();
            rows.insert(tp, points);
            tp *= 2;
        }
        ThroughputProfile {
            rows,
            synthetic: true,
        }
    }
}

impl ThroughputProfile {
    pub fn from_rows(rows: BTreeMap<u32, Vec<ProfilePoint>>) -> Result<Self> {
        if rows.is_empty() || rows.values().any(Vec::is_empty) {
            return Err(SimError::EmptyProfile);
        }
        let p = ThroughputProfile {
            rows,
            synthetic: false,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (tp, pts) in &self.rows {
            for w in pts.windows(2) {
                if w[1].batch <= w[0].batch {
                    return Err(SimError::ProfileParse {
                        line: 0,
                        msg: format!("tp {tp}: batch sizes must be strictly increasing"),
                    });
                }
                if w[1].decode_tps < w[0].decode_tps {
                    return Err(SimError::ProfileParse {
                        line: 0,
                        msg: format!("tp {tp}: decode throughput decreases at batch {}", w[1].batch),
                    });
                }
            }
            if pts.iter().any(|p| !(p.decode_tps > 0.0 && p.prefill_tps > 0.0)) {
                return Err(SimError::ProfileParse {
                    line: 0,
                    msg: format!("tp {tp}: throughput entries must be positive"),
                });
            }
        }
        Ok(())
    }

    pub fn tp_sizes(&self) -> impl Iterator<Item = u32> + '_ {
        self.rows.keys().copied()
    }

    pub fn has_tp(&self, tp: u32) -> bool {
        self.rows.contains_key(&tp)
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn interp(&self, tp: u32, batch: f64, f: impl Fn(&ProfilePoint) -> f64) -> f64 {
        let pts = &self.rows[&tp];
        let first = &pts[0];
        if batch <= first.batch {
            // Below the first point aggregate throughput scales linearly.
            return f(first) * batch / first.batch;
        }
        let i = pts.partition_point(|p| p.batch < batch);
        if i >= pts.len() {
            let n = pts.len();
            if n == 1 {
                return f(&pts[0]);
            }
            let (a, b) = (&pts[n - 2], &pts[n - 1]);
            let slope = (f(b) - f(a)) / (b.batch - a.batch);
            return f(b) + slope * (batch - b.batch);
        }
        let b = &pts[i];
        if i == 0 || b.batch == batch {
            return f(b);
        }
        let a = &pts[i - 1];
        let w = (batch - a.batch) / (b.batch - a.batch);
        f(a) + w * (f(b) - f(a))
    }

    /// Aggregate decode tokens/s of a `tp` instance running `batch` sequences.
    pub fn decode_tps(&self, tp: u32, batch: usize) -> f64 {
        if batch == 0 {
            return 0.0;
        }
        self.interp(tp, batch as f64, |p| p.decode_tps)
    }

    pub fn prefill_tps(&self, tp: u32, batch: usize) -> f64 {
        let pts = &self.rows[&tp];
        if batch == 0 {
            return pts[0].prefill_tps;
        }
        let b = (batch as f64).max(pts[0].batch);
        self.interp(tp, b, |p| p.prefill_tps)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut rows: BTreeMap<u32, Vec<ProfilePoint>> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("tp,") {
                continue;
            }
            let err = |msg: String| SimError::ProfileParse { line: line_no, msg };
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(err(format!("expected 4 fields, found {}", f.len())));
            }
            let tp: u32 = f[0].parse().map_err(|_| err(format!("bad tp {:?}", f[0])))?;
            if !tp.is_power_of_two() {
                return Err(err(format!("tp {tp} is not a power of two")));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite() && *v > 0.0)
                    .ok_or_else(|| err(format!("bad value {s:?}")))
            };
            let point = ProfilePoint {
                batch: num(f[1])?,
                decode_tps: num(f[2])?,
                prefill_tps: num(f[3])?,
            };
            let row = rows.entry(tp).or_default();
            if let Some(last) = row.last() {
                if point.batch <= last.batch {
                    return Err(err(format!("tp {tp}: batch sizes must increase")));
                }
                if point.decode_tps < last.decode_tps {
                    return Err(err(format!("tp {tp}: decode throughput not monotone in batch")));
                }
            }
            row.push(point);
        }
        if rows.is_empty() {
            return Err(SimError::EmptyProfile);
        }
        Self::from_rows(rows)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("tp,batch,decode_tps,prefill_tps\n");
        for (tp, pts) in &self.rows {
            for p in pts {
                let _ = writeln!(out, "{tp},{},{},{}", p.batch, p.decode_tps, p.prefill_tps);
            }
        }
        out
    }
}
