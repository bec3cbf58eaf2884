//! Prints one line per acceptance criterion and fails when any of them fails.
//!
//! `cargo test --test acceptance -- 4 7` runs only the listed criteria.

use std::process::ExitCode;
use std::time::Instant;

use rwoa::acceptance::{run_criterion, CRITERIA};
use rwoa::batch::Execution;

fn main() -> ExitCode {
    let selected: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let exec = Execution::from_env();
    let mut failed = 0;
    for (id, _) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let started = Instant::now();
        let report = run_criterion(id, exec).expect("criterion ids come from the table");
        println!("{report} [{:.1} s]", started.elapsed().as_secs_f64());
        if !report.passed {
            failed += 1;
        }
    }
    if failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criterion/criteria failed");
        ExitCode::FAILURE
    }
}
