use std::time::{Duration, Instant};

use kgcoder::case::Case;
use kgcoder::runner::{self, RunStatus, Runner};

#[test]
fn infinite_loop_times_out_within_budget() {
    let r = Runner::new("python3 {file}", Duration::from_secs(2));
    let start = Instant::now();
    let (case, out) = runner::validate_case(Case::new("spin", "loop forever", "while True:\n    pass\n"), &r).unwrap();
    let wall = start.elapsed();
    assert_eq!(out.status, RunStatus::TimedOut);
    assert!(!case.validated);
    assert!(
        wall >= Duration::from_secs(2) && wall < Duration::from_secs(4),
        "took {wall:?}"
    );
}

#[test]
fn clean_and_failing_programs() {
    let r = Runner::new("python3 {file}", Duration::from_secs(10));
    let (ok, out) = runner::validate_case(Case::new("ok", "t", "x = 1 + 1\n"), &r).unwrap();
    assert!(ok.validated && out.passed());
    let (bad, out) = runner::validate_case(Case::new("bad", "t", "raise SystemExit(3)\n"), &r).unwrap();
    assert!(!bad.validated);
    assert_eq!(out.status, RunStatus::Failed { exit_code: Some(3) });
}

#[test]
fn child_processes_are_killed_on_timeout() {
    let r = Runner::new("sh {file}", Duration::from_millis(500));
    let start = Instant::now();
    let out = r.run_source("sleep 30 &\nsleep 30\n").unwrap();
    assert_eq!(out.status, RunStatus::TimedOut);
    assert!(start.elapsed() < Duration::from_secs(5));
}
