//! Reporting for the acceptance gates. The gates themselves live in
//! `tests/acceptance.rs`; this crate exists so that they run after every
//! other suite in a workspace test run.

use std::time::{Duration, Instant};

/// Result of one gate: whether it held and the measured values behind it.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

/// Collects gate results and prints one line per gate.
#[derive(Debug, Default)]
pub struct Report {
    filter: Vec<String>,
    failed: Vec<u32>,
    ran: usize,
}

impl Report {
    /// Gates whose number is not in `filter` are skipped; an empty filter
    /// runs everything.
    pub fn new(filter: Vec<String>) -> Self {
        Self {
            filter,
            ..Self::default()
        }
    }

    pub fn wants(&self, id: u32) -> bool {
        self.filter.is_empty() || self.filter.iter().any(|f| f == &id.to_string())
    }

    /// Runs gate `id` unless filtered out. Exceeding `budget` fails the gate
    /// even if its check held.
    pub fn gate(&mut self, id: u32, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) {
        if !self.wants(id) {
            return;
        }
        let start = Instant::now();
        let out = f();
        let took = start.elapsed();
        self.record(id, name, out, took, budget);
    }

    /// Records an outcome computed elsewhere.
    pub fn record(&mut self, id: u32, name: &str, out: Outcome, took: Duration, budget: Duration) {
        let in_time = took <= budget;
        let pass = out.pass && in_time;
        let mut detail = out.detail;
        if !in_time {
            detail.push_str(&format!("; over the {}s budget", budget.as_secs()));
        }
        println!(
            "criterion {id} {}: {name}: {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
        self.ran += 1;
        if !pass {
            self.failed.push(id);
        }
    }

    pub fn failed(&self) -> &[u32] {
        &self.failed
    }

    pub fn summary(&self) -> String {
        format!("{} of {} criteria passed", self.ran - self.failed.len(), self.ran)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_overrun_fails_the_gate() {
        let mut r = Report::default();
        r.record(1, "x", Outcome::new(true, "ok"), Duration::from_secs(3), Duration::from_secs(2));
        r.record(2, "y", Outcome::new(true, "ok"), Duration::from_secs(1), Duration::from_secs(2));
        assert_eq!(r.failed(), &[1]);
        assert_eq!(r.summary(), "1 of 2 criteria passed");
    }

    #[test]
    fn filter_selects_by_number() {
        let r = Report::new(vec!["3".into()]);
        assert!(r.wants(3));
        assert!(!r.wants(4));
        assert!(Report::new(vec![]).wants(9));
    }
}
