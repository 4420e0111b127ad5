//! Acceptance checks, one line per criterion.
//!
//! Runs without the libtest harness so every line is printed. The process
//! fails when a criterion fails unless it is listed in `KNOWN_UNMET`; those
//! are reported as FAIL and explained in the README.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use tailsim::metrics::write_csv;
use tailsim::oracle::{check_coverage, oracle_mean_gradient, run_baseline, Coverage};
use tailsim::planner::{PlannerConfig, PlannerState};
use tailsim::reward::{TimeoutConfig, TimeoutPolicy};
use tailsim::rollout::RoundKind;
use tailsim::scenario::TpChoice;
use tailsim::trainer::{GradLedger, Sample, Trigger};
use tailsim::{run, run_detailed, Scenario, StepReport, Toggles};

/// Criteria that do not hold on the synthetic profile.
const KNOWN_UNMET: &[u32] = &[7, 8];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn preset(name: &str) -> Scenario {
    Scenario::preset(name).expect("known preset")
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn run_seeds(base: &Scenario, seeds: &[u64]) -> Vec<Vec<StepReport>> {
    seeds
        .par_iter()
        .map(|&s| {
            let mut sc = base.clone();
            sc.run.seed = s;
            run(&sc).expect("run succeeds")
        })
        .collect()
}

fn periodicity() -> Verdict {
    let mut sc = preset("14b-16k");
    sc.run.max_response_len = 512;
    sc.run.num_steps = 20;
    let reports = run(&sc).expect("run succeeds");
    let got: String = reports
        .iter()
        .map(|r| match r.round_kind {
            RoundKind::Short => 'S',
            RoundKind::Long => 'L',
            RoundKind::Baseline => 'B',
        })
        .collect();
    let want = "SSSSL".repeat(4);
    let deferred = reports
        .iter()
        .filter(|r| r.round_kind == RoundKind::Short)
        .all(|r| r.deferrals == 32);
    verdict(got == want && deferred, got)
}

fn coverage() -> Verdict {
    let seeds: Vec<u64> = (0..50).collect();
    let bad: Vec<String> = seeds
        .par_iter()
        .filter_map(|&seed| {
            let mut sc = preset("14b-16k");
            sc.run.seed = seed;
            sc.run.max_response_len = 512;
            sc.workload.dataset_size = 1000;
            // 1000 prompts take 8 steps to draw; the last deferrals drain
            // within the following long rounds.
            sc.run.num_steps = 16;
            let out = run_detailed(&sc, false).expect("run succeeds");
            let log = &out.epochs[0];
            let mut drawn = log.drawn.clone();
            let mut trained = log.trained.clone();
            drawn.sort();
            trained.sort();
            match check_coverage(log, 1000) {
                Coverage::Ok if drawn == trained => None,
                c => Some(format!("seed {seed}: {c:?}")),
            }
        })
        .collect();
    verdict(bad.is_empty(), format!("50 seeds, {} bad", bad.len()))
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

fn gradient_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst = 0.0f64;
    for trace in 0..100u64 {
        let n = rng.random_range(1..400usize);
        let dim = rng.random_range(1..16usize);
        let replicas = rng.random_range(1..9usize);
        let samples: Vec<Sample> = (0..n)
            .map(|i| Sample {
                id: trace << 32 | i as u64,
                tokens: rng.random_range(1..8192),
                reward: Some(if rng.random_bool(0.5) { 1.0 } else { 0.0 }),
                grad: (0..dim).map(|_| rng.random_range(-1e3..1e3)).collect(),
            })
            .collect();
        let scale_at = rng.random_range(0..=n);
        let mut ledger = GradLedger::new(replicas, dim);
        let mut i = 0;
        while i < scale_at {
            let take = rng.random_range(1..=16usize).min(scale_at - i);
            let r = rng.random_range(0..replicas);
            ledger.stream_grad(r, &samples[i..i + take]).expect("fresh samples");
            i += take;
        }
        let got = ledger.finalize_update(&samples[scale_at..], n).expect("counts match");
        let grads: Vec<Vec<f64>> = samples.iter().map(|s| s.grad.clone()).collect();
        let want = oracle_mean_gradient(&grads).expect("non-empty");
        worst = worst.max(rel_err(&got, &want));
    }

    // The same property through the engine: fixed triggers at random
    // fractions and random replica sizes.
    let mut cases = Vec::new();
    for _ in 0..8 {
        let mut sc = preset("7b-8k");
        sc.run.seed = rng.random_range(0..1000);
        sc.run.num_steps = 5;
        sc.train.trigger = Trigger::Fixed(rng.random_range(0.05..0.6));
        sc.train.replica_gpus = [1, 2, 4, 8][rng.random_range(0..4)];
        cases.push(sc);
    }
    let engine: Vec<(f64, usize)> = cases
        .par_iter()
        .map(|sc| {
            let out = run_detailed(sc, false).expect("run succeeds");
            let w = out
                .gradients
                .iter()
                .fold(0.0f64, |m, g| m.max(rel_err(&g.finalized, &g.oracle)));
            (w, out.scale_events.len())
        })
        .collect();
    let scaled: usize = engine.iter().map(|e| e.1).sum();
    let engine_worst = engine.iter().fold(0.0f64, |m, e| m.max(e.0));
    worst = worst.max(engine_worst);
    verdict(
        worst <= 1e-12 && scaled > 0,
        format!("worst relative error {worst:.2e} over 100 traces and {scaled} engine scale events"),
    )
}

fn timeout_sweep() -> Verdict {
    let cfg = TimeoutConfig::default();
    let mut bad = Vec::new();
    for (case, &t) in [0.5, 1.0, 2.0, 10.0, 19.9, 20.0, 25.0, 100.0].iter().enumerate() {
        let mut p = TimeoutPolicy::new(cfg.clone());
        p.set_anchor(case as u32, t);
        let want = (1.5 * t).max(2.0).min(30.0);
        if p.compute_timeout(case as u32) != want {
            bad.push(t);
        }
    }
    let p = TimeoutPolicy::new(cfg);
    let unanchored = p.compute_timeout(99) == 30.0;
    verdict(bad.is_empty() && unanchored, format!("{} anchors off", bad.len()))
}

fn planner() -> Verdict {
    // (starting TP, preemption history, expected TP after the last step)
    let table: &[(u32, &[u64], u32)] = &[
        (2, &[100, 110], 4),
        (2, &[100, 104], 2),
        (2, &[100, 105], 2),
        (2, &[100, 106], 4),
        (4, &[0, 0, 0, 0], 2),
        (4, &[0, 0, 0], 4),
        (4, &[5, 0, 0, 0], 4),
        (8, &[100, 200], 8),
        (1, &[0, 0, 0, 0], 1),
        (1, &[0, 11], 2),
        (1, &[0, 10], 1),
        (2, &[50], 2),
    ];
    let mut bad = 0;
    for &(tp, hist, want) in table {
        let mut p = PlannerState::new(PlannerConfig::default(), tp, 8);
        let got = hist.iter().fold(tp, |_, &c| p.decide_tp(c));
        if got != want {
            bad += 1;
        }
    }

    let ramp = preset("planner-ramp");
    let mut fixed = ramp.clone();
    fixed.run.toggles = Toggles::NONE;
    fixed.cluster.tp = TpChoice::Fixed(1);
    let [a, b]: [Vec<StepReport>; 2] = [ramp, fixed]
        .par_iter()
        .map(|sc| run(sc).expect("run succeeds"))
        .collect::<Vec<_>>()
        .try_into()
        .expect("two runs");
    let rollout = |rs: &[StepReport]| rs.iter().map(|r| r.rollout_s + r.reconfig_s).sum::<f64>();
    let speedup = rollout(&b) / rollout(&a);
    verdict(
        bad == 0 && speedup >= 1.3,
        format!("{} of {} table rows off, ramp rollout speedup {speedup:.2}x", bad, table.len()),
    )
}

fn tail_batching() -> Verdict {
    let seeds = [0, 1, 2, 3, 4];
    let mut tb = preset("14b-16k");
    tb.run.toggles = Toggles {
        tail_batching: true,
        ..Toggles::NONE
    };
    let mut base = tb.clone();
    base.run.toggles = Toggles::NONE;
    let t = run_seeds(&tb, &seeds);
    let b = run_seeds(&base, &seeds);
    let short_max = mean(
        t.iter()
            .flatten()
            .filter(|r| r.round_kind == RoundKind::Short)
            .map(|r| f64::from(r.max_resp_len)),
    );
    let base_max = mean(b.iter().flatten().map(|r| f64::from(r.max_resp_len)));
    let speedup = mean(b.iter().flatten().map(|r| r.rollout_s)) / mean(t.iter().flatten().map(|r| r.rollout_s));
    verdict(
        short_max <= base_max / 3.0 && speedup >= 1.2,
        format!("short max {short_max:.0} vs baseline max {base_max:.0}, rollout speedup {speedup:.2}x"),
    )
}

fn reward_overlap() -> Verdict {
    let seeds = [0, 1, 2, 3, 4];
    let mut overlap = preset("code-14b");
    overlap.run.toggles = Toggles {
        tail_batching: true,
        reward_scheduler: true,
        ..Toggles::NONE
    };
    let mut fixed = overlap.clone();
    fixed.reward.timeout.adaptive = false;
    let mut base = overlap.clone();
    base.run.toggles = Toggles::NONE;
    let o = run_seeds(&overlap, &seeds);
    let f = run_seeds(&fixed, &seeds);
    let b = run_seeds(&base, &seeds);
    let exposed = mean(
        o.iter()
            .flatten()
            .filter(|r| r.round_kind == RoundKind::Short)
            .map(|r| r.reward_exposed_s),
    );
    let sequential = mean(b.iter().flatten().map(|r| r.reward_exposed_s));
    let cpu = |runs: &[Vec<StepReport>]| runs.iter().flatten().map(|r| r.sandbox_cpu_s).sum::<f64>();
    let (cpu_a, cpu_f) = (cpu(&o), cpu(&f));
    let ratio = exposed / sequential;
    verdict(
        ratio <= 0.5 && cpu_a < cpu_f,
        format!(
            "short-round exposed {exposed:.1} s = {:.0}% of sequential {sequential:.1} s; sandbox CPU {cpu_a:.0} s adaptive vs {cpu_f:.0} s fixed",
            ratio * 100.0
        ),
    )
}

fn stream_trainer() -> Verdict {
    let seeds = [0, 1, 2, 3, 4];
    let triggers = [Trigger::Adaptive, Trigger::Fixed(0.2), Trigger::Fixed(0.3), Trigger::Fixed(0.4)];
    let mut worst_migration = 0.0f64;
    let mut events = 0;
    let mut means = Vec::new();
    for trig in triggers {
        let mut sc = preset("7b-8k");
        sc.train.trigger = trig;
        let outs: Vec<_> = seeds
            .par_iter()
            .map(|&s| {
                let mut sc = sc.clone();
                sc.run.seed = s;
                run_detailed(&sc, false).expect("run succeeds")
            })
            .collect();
        for o in &outs {
            for e in &o.scale_events {
                worst_migration = worst_migration.max(e.migration_s);
                events += 1;
            }
        }
        means.push(mean(outs.iter().flat_map(|o| o.reports.iter().map(|r| r.total_s))));
    }
    let adaptive = means[0];
    let beats = means[1..].iter().all(|&m| adaptive <= m);
    verdict(
        worst_migration <= 3.0 && events > 0 && beats,
        format!(
            "max migration {worst_migration:.2} s over {events} events; mean step adaptive {:.3} s, fixed 0.2/0.3/0.4 {:.3}/{:.3}/{:.3} s",
            means[0], means[1], means[2], means[3]
        ),
    )
}

fn csv_bytes(rows: &[StepReport]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_csv(&mut buf, rows).expect("csv");
    buf
}

fn determinism() -> Verdict {
    let seeds: Vec<u64> = (0..10).collect();
    let mismatches: usize = seeds
        .par_iter()
        .map(|&seed| {
            let mut sc = preset("14b-16k");
            sc.run.seed = seed;
            sc.run.num_steps = 5;
            let mut off = sc.clone();
            off.run.toggles = Toggles::NONE;
            let sim = run(&off).expect("run succeeds");
            let oracle = run_baseline(&off).expect("oracle succeeds");
            let again = run(&sc).expect("run succeeds");
            let first = run(&sc).expect("run succeeds");
            usize::from(sim != oracle || csv_bytes(&sim) != csv_bytes(&oracle))
                + usize::from(first != again || csv_bytes(&first) != csv_bytes(&again))
        })
        .sum();
    verdict(mismatches == 0, format!("{mismatches} mismatches over 10 seeds"))
}

fn memory_safety() -> Verdict {
    // The engine checks every instance's KV use after each event and fails
    // the run on overflow, so a clean sweep is the check.
    let mut jobs = Vec::new();
    for name in tailsim::scenario::PRESETS {
        for toggles in tailsim::matrix::ladder() {
            for seed in 0..2 {
                let mut sc = preset(name);
                sc.run.toggles = toggles;
                sc.run.seed = seed;
                sc.run.num_steps = 5;
                jobs.push(sc);
            }
        }
    }
    let failures: Vec<String> = jobs
        .par_iter()
        .filter_map(|sc| run(sc).err().map(|e| e.to_string()))
        .collect();
    verdict(
        failures.is_empty(),
        match failures.first() {
            None => format!("{} runs clean", jobs.len()),
            Some(e) => format!("{} of {} runs failed: {e}", failures.len(), jobs.len()),
        },
    )
}

fn main() -> ExitCode {
    // `cargo test` passes harness flags such as `--quiet`; none apply here.
    let criteria: [(u32, &str, Duration, fn() -> Verdict); 10] = [
        (1, "round periodicity", Duration::from_secs(1), periodicity),
        (2, "epoch coverage", Duration::from_secs(30), coverage),
        (3, "gradient equivalence", Duration::from_secs(10), gradient_equivalence),
        (4, "adaptive timeout formula", Duration::from_secs(1), timeout_sweep),
        (5, "parallelism planner", Duration::from_secs(60), planner),
        (6, "tail batching speedup", Duration::from_secs(120), tail_batching),
        (7, "reward overlap", Duration::from_secs(60), reward_overlap),
        (8, "stream trainer scaling", Duration::from_secs(120), stream_trainer),
        (9, "determinism and oracle agreement", Duration::from_secs(60), determinism),
        (10, "memory safety", Duration::from_secs(600), memory_safety),
    ];
    let mut unexpected = 0;
    for (id, name, budget, check) in criteria {
        let start = Instant::now();
        let v = check();
        let took = start.elapsed();
        let pass = v.pass && took <= budget;
        let tag = match (pass, KNOWN_UNMET.contains(&id)) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => {
                unexpected += 1;
                "FAIL"
            }
        };
        println!("[{tag}] {id:>2} {name}: {} ({:.2} s)", v.detail, took.as_secs_f64());
    }
    if unexpected == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{unexpected} unexpected failure(s)");
        ExitCode::FAILURE
    }
}
