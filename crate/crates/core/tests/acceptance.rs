//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria in `KNOWN_RED` are reported but do not fail the run.

use conestokes::verify::{check_count, run_check, KNOWN_RED};

fn main() {
    let mut unexpected = Vec::new();
    for id in 1..=check_count() {
        let r = run_check(id).unwrap();
        let tag = if r.passed { "PASS" } else { "FAIL" };
        println!("criterion {:>2} {tag}  {} [{:.2}s]: {}", r.id, r.name, r.seconds, r.detail);
        if r.known_red && !r.passed {
            let why = KNOWN_RED.iter().find(|k| k.0 == id).unwrap().1;
            println!("             documented: {why}");
        }
        if r.unexpected() {
            unexpected.push(id);
        }
    }
    if !unexpected.is_empty() {
        eprintln!("criteria with unexpected status: {unexpected:?}");
        std::process::exit(1);
    }
}
