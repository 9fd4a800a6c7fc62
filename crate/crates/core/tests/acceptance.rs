//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! The multi-hour stochastic pipeline (criterion 10) runs only with
//! `cargo test --test acceptance -- --include-ignored` or `--ignored`, or
//! when `HAN_RDM_SLOW=1` is set.

use std::process::ExitCode;

use han_rdm::verify;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let slow = args.iter().any(|a| a == "--ignored" || a == "--include-ignored")
        || std::env::var("HAN_RDM_SLOW").is_ok_and(|v| v == "1");
    let scratch = tempfile::tempdir().expect("temporary directory");
    let jobs = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);

    println!("acceptance criteria ({})", if slow { "full suite" } else { "criterion 10 skipped; pass --include-ignored" });
    let outcomes = verify::run_all(scratch.path(), slow, jobs);
    for o in &outcomes {
        println!("{}", o.line());
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("acceptance: {} passed, {failed} failed", outcomes.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
