//! Bookkeeping for the acceptance run: one verdict line per criterion.

use std::fmt;
use std::time::{Duration, Instant};

#[derive(Clone, Debug)]
pub struct Verdict {
    pub id: &'static str,
    pub title: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
    pub budget: Option<Duration>,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let budget = self
            .budget
            .map_or(String::new(), |b| format!(" / budget {:.0}s", b.as_secs_f64()));
        write!(
            f,
            "[{}] {:>3} {}: {} ({:.1}s{budget})",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.title,
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

/// Collects verdicts and prints each one as soon as it is known.
#[derive(Default)]
pub struct Ledger {
    verdicts: Vec<Verdict>,
}

impl Ledger {
    /// Runs `check`, which returns pass/fail plus a detail string. Exceeding the
    /// runtime budget counts as a failure.
    pub fn check(
        &mut self,
        id: &'static str,
        title: &'static str,
        budget: Option<Duration>,
        check: impl FnOnce() -> (bool, String),
    ) -> bool {
        let start = Instant::now();
        let (ok, mut detail) = check();
        let elapsed = start.elapsed();
        let in_budget = budget.is_none_or(|b| elapsed <= b);
        if !in_budget {
            detail.push_str("; over runtime budget");
        }
        let verdict = Verdict {
            id,
            title,
            passed: ok && in_budget,
            detail,
            elapsed,
            budget,
        };
        println!("{verdict}");
        let passed = verdict.passed;
        self.verdicts.push(verdict);
        passed
    }

    pub fn verdicts(&self) -> &[Verdict] {
        &self.verdicts
    }

    pub fn failures(&self) -> usize {
        self.verdicts.iter().filter(|v| !v.passed).count()
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats() {
        assert_eq!(mean(&[1.0, 2.0, 3.0]), 2.0);
        assert!((std_dev(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn budget_overrun_fails() {
        let mut ledger = Ledger::default();
        assert!(!ledger.check("x", "slow", Some(Duration::ZERO), || {
            std::thread::sleep(Duration::from_millis(2));
            (true, "ok".into())
        }));
        assert!(ledger.check("y", "fine", None, || (true, "ok".into())));
        assert_eq!(ledger.failures(), 1);
        assert!(ledger.verdicts()[0].to_string().starts_with("[FAIL]"));
    }
}
