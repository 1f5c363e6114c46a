use std::path::Path;
use std::process::{Command, Output};

fn glosa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glosa"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("run glosa")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn simulate(dir: &Path, extra: &[&str]) {
    let mut args = vec!["--out-dir", "sim", "--seed", "3", "simulate", "--snr", "30"];
    args.extend_from_slice(extra);
    let out = glosa(dir, &args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn simulate_then_estimate() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &[]);
    let out = glosa(dir.path(), &["--out-dir", "est", "estimate", "sim/records.csv"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("period kyr"));
    for f in ["estimate.json", "periods.txt", "spectrum.csv", "glosa_spectrum.csv"] {
        assert!(dir.path().join("est").join(f).exists(), "{f}");
    }
    let table = std::fs::read_to_string(dir.path().join("est/periods.txt")).unwrap();
    assert_eq!(table.lines().count(), 5);
}

#[test]
fn simulate_is_seed_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    simulate(a.path(), &["--missampling"]);
    simulate(b.path(), &["--missampling"]);
    for f in ["sim/records.csv", "sim/truth.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
}

#[test]
fn bounds_columns() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &["--missampling"]);
    let out = glosa(
        dir.path(),
        &["bounds", "--truth", "sim/truth.json", "--pattern", "sim/records.csv", "--snr", "0,20"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("bounds.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("snr_db,crb_sum,mcrb_sum,bias_sq_sum,lb_sum"));
    assert_eq!(lines.count(), 2);
}

#[test]
fn baseline_and_term_balance() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &[]);
    let out = glosa(dir.path(), &["baseline", "sim/records.csv", "--method", "stacked", "--peaks", "4"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("baseline_spectrum.csv").exists());
    let out = glosa(dir.path(), &["--zooms", "2", "term-balance", "sim/records.csv"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 3);
}

#[test]
fn experiment_writes_results() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), r#"{"n_runs": 2, "snr_list": [20.0]}"#).unwrap();
    let out = glosa(dir.path(), &["--config", "cfg.json", "--out-dir", "res", "experiment"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("res/result.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 7);
    assert!(dir.path().join("res/result.json").exists());
    assert!(dir.path().join("res/timing.csv").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("zero.json"), r#"{"n_runs": 0}"#).unwrap();
    assert_eq!(code(&glosa(p, &["--config", "zero.json", "experiment"])), 2);
    assert_eq!(code(&glosa(p, &["--lambda", "-1", "experiment"])), 2);
    assert_eq!(code(&glosa(p, &["--standardize", "maybe", "experiment"])), 2);

    std::fs::write(p.join("empty.csv"), "").unwrap();
    let out = glosa(p, &["estimate", "empty.csv"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
    assert_eq!(code(&glosa(p, &["estimate", "missing.csv"])), 3);

    std::fs::write(p.join("prune.json"), r#"{"n_runs": 1, "snr_list": [20.0], "penalties": {"lambda": 1e9}}"#).unwrap();
    assert_eq!(code(&glosa(p, &["--config", "prune.json", "experiment"])), 4);
}
