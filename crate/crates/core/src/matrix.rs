//! Toggle ladder over several seeds, run in parallel.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::Result;
use crate::metrics::{total_time, write_csv_file, StepReport};
use crate::scenario::{Scenario, Toggles};
use crate::sim::run;

/// Cumulative ladder: nothing, then each component added in turn.
pub fn ladder() -> Vec<Toggles> {
    let mut t = Toggles::NONE;
    let mut out = vec![t];
    t.tail_batching = true;
    out.push(t);
    t.reward_scheduler = true;
    out.push(t);
    t.planner = true;
    out.push(t);
    t.stream_trainer = true;
    out.push(t);
    out
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub toggles: Toggles,
    pub seed: u64,
    pub reports: Vec<StepReport>,
}

impl Cell {
    pub fn total(&self) -> f64 {
        total_time(&self.reports)
    }
}

/// Mean and sample standard deviation of per-seed speedups over the
/// all-off configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Speedup {
    pub toggles: Toggles,
    pub mean: f64,
    pub stdev: f64,
}

#[derive(Debug, Clone)]
pub struct MatrixResult {
    pub cells: Vec<Cell>,
    pub speedups: Vec<Speedup>,
}

/// Run every (toggles, seed) pair. The baseline is added when missing so
/// speedups are always defined.
pub fn run_matrix(base: &Scenario, toggles: &[Toggles], seeds: &[u64]) -> Result<MatrixResult> {
    let mut configs: Vec<Toggles> = toggles.to_vec();
    if !configs.contains(&Toggles::NONE) {
        configs.insert(0, Toggles::NONE);
    }
    let jobs: Vec<(Toggles, u64)> = configs
        .iter()
        .flat_map(|&t| seeds.iter().map(move |&s| (t, s)))
        .collect();
    let cells = jobs
        .par_iter()
        .map(|&(toggles, seed)| {
            let mut sc = base.clone();
            sc.run.toggles = toggles;
            sc.run.seed = seed;
            Ok(Cell {
                toggles,
                seed,
                reports: run(&sc)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let baseline = |seed: u64| {
        cells
            .iter()
            .find(|c| c.seed == seed && c.toggles == Toggles::NONE)
            .map(Cell::total)
            .expect("baseline cell")
    };
    let speedups = configs
        .iter()
        .map(|&t| {
            let xs: Vec<f64> = cells
                .iter()
                .filter(|c| c.toggles == t)
                .map(|c| baseline(c.seed) / c.total())
                .collect();
            let (mean, stdev) = mean_stdev(&xs);
            Speedup { toggles: t, mean, stdev }
        })
        .collect();
    Ok(MatrixResult { cells, speedups })
}

fn mean_stdev(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl MatrixResult {
    /// Write one CSV per cell as `{label}-seed{n}.csv`.
    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for c in &self.cells {
            write_csv_file(&dir.join(format!("{}-seed{}.csv", c.toggles.label(), c.seed)), &c.reports)?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let synthetic = self
            .cells
            .iter()
            .any(|c| c.reports.iter().any(|r| r.synthetic_profile));
        let mut s = String::new();
        if synthetic {
            s.push_str("throughput profile: synthetic\n");
        }
        let _ = writeln!(s, "{:<28} {:>9} {:>9}", "toggles", "speedup", "stdev");
        for sp in &self.speedups {
            let _ = writeln!(s, "{:<28} {:>9.3} {:>9.3}", sp.toggles.label(), sp.mean, sp.stdev);
        }
        s
    }
}
