//! Growth advice from a stream of telemetry records.

use std::collections::BTreeMap;

use vmc_core::advice::{growth_advice, AdviceEntry, ResourceWindow};

use crate::telemetry::TelemetryRecord;

/// Keeps the last `window` resource readings of every slot and which slots
/// are free (not relaying a child).
#[derive(Debug, Clone)]
pub struct Advisor {
    window: usize,
    slots: BTreeMap<String, (ResourceWindow, bool)>,
}

impl Advisor {
    pub fn new(window: usize) -> Self {
        Advisor { window, slots: BTreeMap::new() }
    }

    pub fn observe(&mut self, record: &TelemetryRecord) {
        for (k, s) in record.slots.iter().enumerate() {
            let leaf = format!("{}-{}", record.module, k + 1);
            let entry = self.slots.entry(leaf).or_insert_with(|| (ResourceWindow::new(self.window), false));
            if entry.1 != s.live {
                // A slot changing role starts a fresh average.
                entry.0.clear();
            }
            entry.0.push(s.r);
            entry.1 = s.live;
        }
    }

    /// Drops the slots of a module that no longer runs.
    pub fn forget(&mut self, module: &str) {
        let prefix = format!("{module}-");
        self.slots.retain(|leaf, _| !leaf.starts_with(&prefix));
    }

    /// Free leaves ranked by averaged resource.
    pub fn advice(&self) -> Vec<AdviceEntry> {
        growth_advice(
            self.slots
                .iter()
                .filter(|(_, (_, live))| !live)
                .filter_map(|(leaf, (w, _))| w.mean().map(|m| (leaf.clone(), m))),
        )
    }

    pub fn from_records<'a, I: IntoIterator<Item = &'a TelemetryRecord>>(window: usize, records: I) -> Self {
        let mut a = Advisor::new(window);
        for r in records {
            a.observe(r);
        }
        a
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::telemetry::{sim_epoch, SlotTelemetry};

    fn rec(module: &str, r: [f64; 2], live: [bool; 2]) -> TelemetryRecord {
        TelemetryRecord {
            ts: sim_epoch(),
            module: module.into(),
            iter: 1,
            r_in: 0.0,
            r_gen: 1.0,
            s_out: 0.0,
            slots: (0..2)
                .map(|i| SlotTelemetry { s: 0.0, v: 0.0, r: r[i], live: live[i], light: 0.0, upright: 1.0 })
                .collect(),
            parent_ids: vec![],
            child_ids: vec![],
        }
    }

    #[test]
    fn ranks_free_leaves_by_window_mean() {
        let mut a = Advisor::new(2);
        a.observe(&rec("RPN1", [0.9, 0.1], [false, false]));
        a.observe(&rec("RPN1", [0.2, 0.8], [false, false]));
        a.observe(&rec("RPN1", [0.2, 0.8], [false, false]));
        let adv = a.advice();
        assert_eq!(adv[0].leaf, "RPN1-2");
        assert!((adv[0].share - 0.8).abs() < 1e-12);
    }

    #[test]
    fn relaying_slots_are_not_advised() {
        let mut a = Advisor::new(5);
        a.observe(&rec("RPN1", [0.86, 0.14], [true, false]));
        a.observe(&rec("RPN2", [0.39, 0.47], [false, false]));
        let leaves: Vec<String> = a.advice().into_iter().map(|e| e.leaf).collect();
        assert_eq!(leaves, ["RPN2-2", "RPN2-1", "RPN1-2"]);
        a.forget("RPN2");
        assert_eq!(a.advice().len(), 1);
    }

    #[test]
    fn advice_invariant_under_uniform_scaling() {
        let base = [[0.3, 0.2], [0.25, 0.25]];
        let top = |c: f64| {
            let mut a = Advisor::new(3);
            a.observe(&rec("RPN1", [base[0][0] * c, base[0][1] * c], [false, true]));
            a.observe(&rec("RPN2", [base[1][0] * c, base[1][1] * c], [false, false]));
            a.advice().into_iter().map(|e| e.leaf).collect::<Vec<_>>()
        };
        assert_eq!(top(1.0), top(0.37));
        assert_eq!(top(1.0), top(5.0));
    }
}
