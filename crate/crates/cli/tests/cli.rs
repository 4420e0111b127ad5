use std::path::Path;
use std::process::{Command, Output};

fn tailsim(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tailsim"))
        .env_remove("TAILSIM_OUT_DIR")
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .output()
        .expect("spawn tailsim")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn simulate_writes_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let o = tailsim(dir.path(), &["simulate", "preset:7b-8k", "--steps", "2", "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = dir.path().join("tb+reward+planner+trainer-seed3.csv");
    assert!(csv.exists());
    assert!(stdout(&o).contains("steps: 2"));

    let r = tailsim(dir.path(), &["report", csv.to_str().unwrap()]);
    assert!(r.status.success());
    assert!(stdout(&r).contains("steps: 2"));
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_tailsim"))
        .env("TAILSIM_OUT_DIR", dir.path())
        .args(["simulate", "preset:7b-8k", "--steps", "1", "--toggles", "none"])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("none-seed0.csv").exists());
}

#[test]
fn print_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let o = tailsim(dir.path(), &["simulate", "preset:code-14b", "--print-config", "--steps", "2"]);
    assert!(o.status.success());
    let cfg = dir.path().join("code.toml");
    std::fs::write(&cfg, stdout(&o)).unwrap();
    let again = tailsim(dir.path(), &["simulate", cfg.to_str().unwrap(), "--print-config"]);
    assert_eq!(stdout(&again), stdout(&o));
}

#[test]
fn matrix_adds_baseline_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let o = tailsim(
        dir.path(),
        &["matrix", "preset:7b-8k", "--toggles", "tb", "--seeds", "0,1", "--steps", "2"],
    );
    assert!(o.status.success());
    for f in ["none-seed0.csv", "none-seed1.csv", "tb-seed0.csv", "tb-seed1.csv", "summary.txt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert!(stdout(&o).contains("synthetic"));
}

#[test]
fn calibrate_lengths_prints_workload_section() {
    let dir = tempfile::tempdir().unwrap();
    let o = tailsim(dir.path(), &["calibrate-lengths", "default"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.starts_with("[workload]"));
    assert!(s.contains("sigma_response"));
}

#[test]
fn bad_input_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let o = tailsim(dir.path(), &["simulate", "preset:nope"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));

    let o = tailsim(dir.path(), &["simulate", "preset:7b-8k", "--toggles", "turbo"]);
    assert!(!o.status.success());

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[run]\nnum_steps = \"ten\"\n").unwrap();
    let o = tailsim(dir.path(), &["simulate", bad.to_str().unwrap()]);
    assert!(!o.status.success());
}
