//! End-to-end tests of the `nbody` binary: every subcommand is exercised
//! through a real process, checking output files, stdout shape, and exit
//! codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn nbody() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nbody"))
}

/// Per-test scratch directory under the system temp dir; unique per process
/// so parallel test runs don't collide.
fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("nbody-cli-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("create scratch dir");
    dir
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn nbody");
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    out
}

fn run_expect(cmd: &mut Command, code: i32) -> Output {
    let out = cmd.output().expect("spawn nbody");
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    out
}

fn gen(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let path = dir.join(format!("ic-{n}-{seed}.nb"));
    run_ok(nbody()
        .args(["gen", "--n", &n.to_string(), "--seed", &seed.to_string(), "--out"])
        .arg(&path));
    path
}

const HEADER: &str = "backend,n,theta,grain,workers,iteration,tree_time_s,force_time_s,\
                      total_time_s,tasks_spawned,suspensions,mean_list_len";

#[test]
fn gen_writes_header_and_is_deterministic() {
    let dir = scratch("gen");
    let a = gen(&dir, 100, 42);
    let text = std::fs::read_to_string(&a).unwrap();
    assert!(text.starts_with("# nbody v1 N=100\n"), "got header {:?}", text.lines().next());
    assert_eq!(text.lines().count(), 101);

    let b = dir.join("again.nb");
    run_ok(nbody().args(["gen", "--n", "100", "--seed", "42", "--out"]).arg(&b));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let c = dir.join("other-seed.nb");
    run_ok(nbody().args(["gen", "--n", "100", "--seed", "43", "--out"]).arg(&c));
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn gen_rejects_zero_particles() {
    let dir = scratch("gen0");
    let out = run_expect(
        nbody().args(["gen", "--n", "0", "--out"]).arg(dir.join("x.nb")),
        1,
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}

#[test]
fn run_serial_emits_header_and_one_row() {
    let dir = scratch("run-serial");
    let ic = gen(&dir, 100, 7);
    let out = run_ok(nbody().args(["run", "--backend", "serial", "--steps", "1", "--in"]).arg(&ic));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], HEADER);
    // Serial rows pin grain to 0 and workers to 1.
    assert!(lines[1].starts_with("serial,100,0.5,0,1,0,"), "row: {}", lines[1]);
}

#[test]
fn run_dataflow_writes_one_row_per_iteration() {
    let dir = scratch("run-df");
    let ic = gen(&dir, 256, 7);
    let csv_path = dir.join("timings.csv");
    run_ok(nbody()
        .args(["run", "--backend", "dataflow", "--workers", "4", "--grain", "64"])
        .args(["--steps", "10", "--in"])
        .arg(&ic)
        .arg("--timings-out")
        .arg(&csv_path));
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 11, "header + one row per iteration");
    assert_eq!(lines[0], HEADER);
    for (i, row) in lines[1..].iter().enumerate() {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 12);
        assert_eq!(fields[0], "dataflow");
        assert_eq!(fields[3], "64", "grain column");
        assert_eq!(fields[4], "4", "workers column");
        assert_eq!(fields[5], i.to_string(), "iteration column");
        let spawned: u64 = fields[9].parse().unwrap();
        assert!(spawned > 0, "dataflow rows carry engine task counts");
    }
}

#[test]
fn run_theta_zero_state_matches_serial_bitwise() {
    let dir = scratch("run-exact");
    let ic = gen(&dir, 96, 3);
    let serial_out = dir.join("serial.nb");
    let dataflow_out = dir.join("dataflow.nb");
    run_ok(nbody()
        .args(["run", "--backend", "serial", "--theta", "0", "--steps", "3", "--in"])
        .arg(&ic)
        .arg("--state-out")
        .arg(&serial_out));
    run_ok(nbody()
        .args(["run", "--backend", "dataflow", "--theta", "0", "--steps", "3"])
        .args(["--workers", "4", "--grain", "16", "--in"])
        .arg(&ic)
        .arg("--state-out")
        .arg(&dataflow_out));
    assert_eq!(
        std::fs::read(&serial_out).unwrap(),
        std::fs::read(&dataflow_out).unwrap(),
        "exact-mode trajectories must agree bitwise across backends"
    );
}

#[test]
fn verify_exact_mode_passes() {
    let dir = scratch("verify0");
    let ic = gen(&dir, 128, 9);
    let out = run_ok(nbody()
        .args(["verify", "--theta", "0", "--sample", "64", "--workers", "2", "--in"])
        .arg(&ic));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("max_rel_err=0.000e0"), "stdout: {stdout}");
}

#[test]
fn verify_default_bound_passes_at_moderate_theta() {
    let dir = scratch("verify5");
    let ic = gen(&dir, 512, 4);
    let out = run_ok(nbody().args(["verify", "--theta", "0.5", "--sample", "256", "--in"]).arg(&ic));
    assert!(String::from_utf8_lossy(&out.stdout).contains("median_rel_err="));
}

#[test]
fn verify_rejects_oversized_sample() {
    let dir = scratch("verify-sample");
    let ic = gen(&dir, 64, 1);
    run_expect(
        nbody().args(["verify", "--sample", "65", "--in"]).arg(&ic),
        1,
    );
}

#[test]
fn malformed_input_is_a_data_error() {
    let dir = scratch("bad-input");
    let path = dir.join("garbage.nb");
    std::fs::write(&path, "# nbody v1 N=2\n1.0 0 0 0 0 0 0\nnot a number at all\n").unwrap();
    let out = run_expect(nbody().args(["run", "--in"]).arg(&path), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}

#[test]
fn bench_emits_full_sweep_and_summary() {
    let dir = scratch("bench");
    let ic = gen(&dir, 128, 5);
    let csv_path = dir.join("bench.csv");
    let steps = 2;
    let out = run_ok(nbody()
        .args(["bench", "--workers-list", "1,2", "--grain-list", "16,64"])
        .args(["--steps", &steps.to_string(), "--in"])
        .arg(&ic)
        .arg("--out")
        .arg(&csv_path));

    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], HEADER);
    // serial + static per worker count + dataflow per (worker, grain) pair,
    // each contributing one row per iteration.
    let configs = 1 + 2 + 2 * 2;
    assert_eq!(lines.len(), 1 + configs * steps);
    let serial_rows = lines.iter().filter(|l| l.starts_with("serial,")).count();
    assert_eq!(serial_rows, steps);
    let dataflow_rows = lines.iter().filter(|l| l.starts_with("dataflow,")).count();
    assert_eq!(dataflow_rows, 2 * 2 * steps);

    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("best grain per worker count:"), "stdout: {stdout}");
    assert!(stdout.contains("workers=1 grain="), "stdout: {stdout}");
    assert!(stdout.contains("workers=2 grain="), "stdout: {stdout}");
}

#[test]
fn missing_required_flag_is_usage_error() {
    // `gen` without --out.
    run_expect(nbody().args(["gen", "--n", "10"]), 1);
    // `run` without --in.
    run_expect(nbody().args(["run", "--steps", "1"]), 1);
    // Unknown subcommand.
    run_expect(nbody().args(["frobnicate"]), 1);
    // Help exits 0.
    run_expect(nbody().args(["--help"]), 0);
}
