use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use tailsim::matrix::{ladder, run_matrix};
use tailsim::metrics::{read_csv_file, summarize, write_csv_file};
use tailsim::workload::{calibrate_lengths, LengthTargets};
use tailsim::{Scenario, Toggles};

/// Deterministic simulator of synchronous RL post-training steps.
#[derive(Parser)]
#[command(name = "tailsim", version)]
struct Cli {
    /// Directory for result files.
    #[arg(long, global = true, env = "TAILSIM_OUT_DIR", default_value = "tailsim-out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and write its per-step CSV.
    Simulate {
        /// Scenario TOML file, or `preset:NAME`.
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u32>,
        /// Override toggles: `none`, `all` or e.g. `tb+reward`.
        #[arg(long)]
        toggles: Option<String>,
        /// Print the resolved scenario as TOML and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Run toggle sets over seeds and summarize speedups over the baseline.
    Matrix {
        config: String,
        /// Toggle sets; `ladder` expands to the cumulative ablation order.
        #[arg(long, value_delimiter = ',', default_value = "ladder")]
        toggles: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long)]
        steps: Option<u32>,
    },
    /// Fit the response-length model to summary targets.
    CalibrateLengths {
        /// TOML file with p75, max_over_median, n, prompt_share; `default`
        /// uses the built-in targets.
        targets: String,
        #[arg(long, default_value_t = 16_384)]
        cap: u32,
    },
    /// Summarize metrics CSVs.
    Report {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load(config: &str) -> Result<Scenario> {
    Scenario::load(config).with_context(|| format!("loading {config}"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Simulate {
            config,
            seed,
            steps,
            toggles,
            print_config,
        } => {
            let mut sc = load(&config)?;
            if let Some(s) = seed {
                sc.run.seed = s;
            }
            if let Some(n) = steps {
                sc.run.num_steps = n;
            }
            if let Some(t) = toggles {
                sc.run.toggles = Toggles::parse(&t)?;
            }
            if print_config {
                print!("{}", sc.to_toml());
                return Ok(());
            }
            let rows = tailsim::run(&sc)?;
            let path = cli
                .out_dir
                .join(format!("{}-seed{}.csv", sc.run.toggles.label(), sc.run.seed));
            write(&path, &rows)?;
            print!("{}", summarize(&rows));
            println!("wrote {}", path.display());
        }
        Cmd::Matrix {
            config,
            toggles,
            seeds,
            steps,
        } => {
            let mut sc = load(&config)?;
            if let Some(n) = steps {
                sc.run.num_steps = n;
            }
            let mut sets = Vec::new();
            for t in &toggles {
                if t == "ladder" {
                    sets.extend(ladder());
                } else {
                    sets.push(Toggles::parse(t)?);
                }
            }
            if seeds.is_empty() {
                bail!("--seeds needs at least one seed");
            }
            let res = run_matrix(&sc, &sets, &seeds)?;
            res.write_csvs(&cli.out_dir)?;
            let summary = res.summary();
            std::fs::write(cli.out_dir.join("summary.txt"), &summary)?;
            print!("{summary}");
            println!("wrote {} runs to {}", res.cells.len(), cli.out_dir.display());
        }
        Cmd::CalibrateLengths { targets, cap } => {
            let t = if targets == "default" {
                LengthTargets::default()
            } else {
                let text = std::fs::read_to_string(&targets).with_context(|| format!("reading {targets}"))?;
                LengthTargets::from_toml_str(&text)?
            };
            let m = calibrate_lengths(&t, cap)?;
            println!("[workload]");
            println!("median = {}", m.median);
            println!("sigma_prompt = {}", m.sigma_prompt);
            println!("sigma_response = {}", m.sigma_response);
        }
        Cmd::Report { csv } => {
            for path in &csv {
                let rows = read_csv_file(path).with_context(|| format!("reading {}", path.display()))?;
                println!("== {}", path.display());
                print!("{}", summarize(&rows));
            }
        }
    }
    Ok(())
}

fn write(path: &Path, rows: &[tailsim::StepReport]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_csv_file(path, rows).with_context(|| format!("writing {}", path.display()))
}
