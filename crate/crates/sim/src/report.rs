//! Post-run evaluation of scenario checks.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use chrono::{DateTime, Utc};
use serde::Serialize;
use vmc_core::topology::SlotRef;

use crate::advisor::Advisor;
use crate::scenario::{Check, CheckKind, Scenario};
use crate::telemetry::TelemetryRecord;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub expected: String,
    pub observed: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdviceLine {
    pub leaf: String,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub scenario: String,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<CheckOutcome>,
    /// Advice at the end of the run.
    pub final_advice: Vec<AdviceLine>,
    pub warnings: Vec<String>,
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "scenario {} (seed {})", self.scenario, self.seed);
        for c in &self.checks {
            let mark = if c.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "{mark}  {}: expected {}, observed {}", c.name, c.expected, c.observed);
        }
        if !self.final_advice.is_empty() {
            let list: Vec<String> =
                self.final_advice.iter().map(|a| format!("{} {:.1}%", a.leaf, a.share * 100.0)).collect();
            let _ = writeln!(out, "final advice: {}", list.join(", "));
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        let passed = self.checks.iter().filter(|c| c.passed).count();
        let _ = writeln!(out, "{passed}/{} checks passed", self.checks.len());
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Time-windowed view of a run's records.
pub struct Window<'a> {
    records: Vec<&'a TelemetryRecord>,
}

impl<'a> Window<'a> {
    pub fn new(records: &'a [TelemetryRecord], epoch: &DateTime<Utc>, from: f64, to: f64) -> Self {
        Window {
            records: records
                .iter()
                .filter(|r| {
                    let t = r.seconds_since(epoch);
                    t >= from && t <= to
                })
                .collect(),
        }
    }

    fn mean_by_module<F: Fn(&TelemetryRecord) -> Option<f64>>(&self, f: F) -> BTreeMap<&str, f64> {
        let mut acc: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        for r in &self.records {
            if let Some(x) = f(r) {
                let e = acc.entry(r.module.as_str()).or_insert((0.0, 0));
                e.0 += x;
                e.1 += 1;
            }
        }
        acc.into_iter().map(|(m, (s, n))| (m, s / n as f64)).collect()
    }

    /// Mean resource through `leaf` over the mean total generated resource.
    pub fn share(&self, leaf: &str) -> Option<f64> {
        let slot = SlotRef::parse_leaf(leaf).ok()?;
        let idx = slot.slot as usize - 1;
        let module = slot.module.as_str();
        let through = *self
            .mean_by_module(|r| if r.module == module { r.slots.get(idx).map(|s| s.r) } else { None })
            .get(module)?;
        let total: f64 = self.mean_by_module(|r| Some(r.r_gen)).values().sum();
        if total > 0.0 {
            Some(through / total)
        } else {
            None
        }
    }
}

fn fmt_share(x: Option<f64>) -> String {
    match x {
        Some(v) => format!("{v:.3}"),
        None => "no data".into(),
    }
}

pub fn evaluate_check(check: &Check, records: &[TelemetryRecord], epoch: &DateTime<Utc>, advice_window: usize) -> CheckOutcome {
    let w = Window::new(records, epoch, check.from, check.to);
    let (passed, expected, observed) = match &check.kind {
        CheckKind::ShareNear { leaf, target, tolerance } => {
            let s = w.share(leaf);
            (
                s.is_some_and(|s| (s - target).abs() <= *tolerance),
                format!("{leaf} share {target:.3} +/- {tolerance:.3}"),
                fmt_share(s),
            )
        }
        CheckKind::ShareAbove { leaf, min } => {
            let s = w.share(leaf);
            (s.is_some_and(|s| s > *min), format!("{leaf} share > {min:.3}"), fmt_share(s))
        }
        CheckKind::Favours { leaf, over } => {
            let (a, b) = (w.share(leaf), w.share(over));
            (
                matches!((a, b), (Some(a), Some(b)) if a > b),
                format!("{leaf} > {over}"),
                format!("{} vs {}", fmt_share(a), fmt_share(b)),
            )
        }
        CheckKind::AdviceTop { leaf } => {
            let upto: Vec<&TelemetryRecord> =
                records.iter().filter(|r| r.seconds_since(epoch) <= check.to).collect();
            let advice = Advisor::from_records(advice_window, upto).advice();
            let observed = match advice.first() {
                Some(top) => format!("{} ({:.3})", top.leaf, top.share),
                None => "no free leaf".into(),
            };
            (advice.first().is_some_and(|t| &t.leaf == leaf), format!("advice {leaf}"), observed)
        }
        CheckKind::ShareDrops { leaf, baseline } => {
            let before = Window::new(records, epoch, baseline[0], baseline[1]).share(leaf);
            let after = w.share(leaf);
            (
                matches!((before, after), (Some(b), Some(a)) if a < b),
                format!("{leaf} share below baseline"),
                format!("{} -> {}", fmt_share(before), fmt_share(after)),
            )
        }
    };
    CheckOutcome { name: check.name.clone(), passed, expected, observed }
}

pub fn evaluate(scenario: &Scenario, records: &[TelemetryRecord], epoch: &DateTime<Utc>, warnings: Vec<String>) -> Report {
    let checks: Vec<CheckOutcome> = scenario
        .checks
        .iter()
        .map(|c| evaluate_check(c, records, epoch, scenario.runtime.advice_window))
        .collect();
    let final_advice = Advisor::from_records(scenario.runtime.advice_window, records)
        .advice()
        .into_iter()
        .map(|e| AdviceLine { leaf: e.leaf, share: e.share })
        .collect();
    Report {
        scenario: scenario.name.clone(),
        seed: scenario.runtime.seed,
        passed: checks.iter().all(|c| c.passed),
        checks,
        final_advice,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::telemetry::{sim_epoch, SlotTelemetry};

    fn rec(t: f64, module: &str, r_gen: f64, r: [f64; 2]) -> TelemetryRecord {
        TelemetryRecord {
            ts: sim_epoch() + chrono::Duration::microseconds((t * 1e6) as i64),
            module: module.into(),
            iter: 1,
            r_in: 1.0 - r_gen,
            r_gen,
            s_out: 0.0,
            slots: (0..2)
                .map(|i| SlotTelemetry { s: 0.0, v: 0.0, r: r[i], live: false, light: 0.0, upright: 1.0 })
                .collect(),
            parent_ids: vec![],
            child_ids: vec![],
        }
    }

    fn check(kind: CheckKind) -> Check {
        Check { name: "c".into(), from: 10.0, to: 20.0, kind }
    }

    #[test]
    fn shares_average_over_window() {
        let recs = vec![rec(5.0, "RPN1", 1.0, [0.9, 0.1]), rec(12.0, "RPN1", 1.0, [0.6, 0.4]), rec(18.0, "RPN1", 1.0, [0.7, 0.3])];
        let w = Window::new(&recs, &sim_epoch(), 10.0, 20.0);
        assert!((w.share("RPN1-1").unwrap() - 0.65).abs() < 1e-12);
        assert!(w.share("RPN9-1").is_none());
        let near = evaluate_check(
            &check(CheckKind::ShareNear { leaf: "RPN1-1".into(), target: 0.6, tolerance: 0.1 }),
            &recs,
            &sim_epoch(),
            20,
        );
        assert!(near.passed, "{near:?}");
        let above = evaluate_check(&check(CheckKind::ShareAbove { leaf: "RPN1-2".into(), min: 0.4 }), &recs, &sim_epoch(), 20);
        assert!(!above.passed);
        let drops = evaluate_check(
            &check(CheckKind::ShareDrops { leaf: "RPN1-1".into(), baseline: [0.0, 9.0] }),
            &recs,
            &sim_epoch(),
            20,
        );
        assert!(drops.passed, "{drops:?}");
    }

    #[test]
    fn advice_check_uses_records_up_to_window_end() {
        let recs = vec![rec(15.0, "RPN1", 1.0, [0.6, 0.4]), rec(25.0, "RPN1", 1.0, [0.1, 0.9])];
        let c = evaluate_check(&check(CheckKind::AdviceTop { leaf: "RPN1-1".into() }), &recs, &sim_epoch(), 1);
        assert!(c.passed, "{c:?}");
    }
}
