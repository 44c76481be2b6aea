//! Acceptance criteria, one PASS/FAIL line each.
//!
//! `ACCEPTANCE_ONLY=1,5,9` restricts the run to the listed criteria.

mod fixtures;
mod golden;
mod learning;
mod oracles;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

pub struct Verdict {
    pub passed: bool,
    pub detail: String,
}

impl Verdict {
    pub fn check(passed: bool, detail: impl Into<String>) -> Self {
        Verdict { passed, detail: detail.into() }
    }
}

struct Criterion {
    id: usize,
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Verdict,
}

const fn secs(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

const CRITERIA: [Criterion; 12] = [
    Criterion { id: 1, name: "golden connecting-path context", limit: secs(1), run: golden::context_chain },
    Criterion { id: 2, name: "path search matches exhaustive enumeration", limit: secs(60), run: oracles::path_search },
    Criterion { id: 3, name: "sentence filter matches naive recomputation", limit: secs(30), run: oracles::filters },
    Criterion {
        id: 4,
        name: "analytic gradients match finite differences",
        limit: secs(120),
        run: golden::gradient_check,
    },
    Criterion { id: 5, name: "threshold loss analytic case", limit: None, run: golden::loss_analytic },
    Criterion { id: 6, name: "synthetic overfit", limit: secs(600), run: learning::overfit },
    Criterion {
        id: 7,
        name: "graph context beats no context held out",
        limit: secs(1800),
        run: learning::context_ablation,
    },
    Criterion { id: 8, name: "filters beat no filters held out", limit: None, run: learning::filter_ablation },
    Criterion { id: 9, name: "F1 and PR-AUC match slow oracles", limit: None, run: oracles::metrics },
    Criterion { id: 10, name: "retrieval ranking matches score-all-pairs", limit: None, run: oracles::retrieval },
    Criterion { id: 11, name: "explanations are faithful and stable", limit: None, run: learning::explanations },
    Criterion { id: 12, name: "end-to-end determinism", limit: None, run: learning::determinism },
];

fn main() -> ExitCode {
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for c in CRITERIA.iter().filter(|c| only.as_ref().is_none_or(|o| o.contains(&c.id))) {
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Verdict::check(false, format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let over = c.limit.filter(|l| elapsed > *l);
        let passed = verdict.passed && over.is_none();
        let mut detail = verdict.detail;
        if let Some(l) = over {
            detail.push_str(&format!("; over the {:.0} s limit", l.as_secs_f64()));
        }
        println!(
            "criterion {:>2} {} {} [{:.2} s] {}",
            c.id,
            if passed { "PASS" } else { "FAIL" },
            c.name,
            elapsed.as_secs_f64(),
            detail
        );
        failed += usize::from(!passed);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
