//! Ranking of free leaves for the next growth step.
//!
//! New modules should preferably be attached where resource accumulates, so
//! free leaves are ranked by their recent average resource.

use alloc::collections::VecDeque;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

pub const DEFAULT_WINDOW: usize = 20;

/// Sliding window over the last `capacity` resource readings of a slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ResourceWindow {
    values: VecDeque<f64>,
    capacity: usize,
}

impl ResourceWindow {
    pub fn new(capacity: usize) -> Self {
        let capacity = capacity.max(1);
        ResourceWindow { values: VecDeque::with_capacity(capacity), capacity }
    }

    pub fn push(&mut self, value: f64) {
        if self.values.len() == self.capacity {
            self.values.pop_front();
        }
        self.values.push_back(value);
    }

    pub fn mean(&self) -> Option<f64> {
        if self.values.is_empty() {
            None
        } else {
            Some(self.values.iter().sum::<f64>() / self.values.len() as f64)
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn clear(&mut self) {
        self.values.clear();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdviceEntry {
    pub leaf: String,
    /// Averaged resource of the leaf.
    pub resource: f64,
    /// Fraction of the resource held by all listed leaves.
    pub share: f64,
}

/// Orders free leaves by averaged resource, largest first; ties go to the
/// lexicographically smaller leaf id.
pub fn growth_advice<I, S>(leaves: I) -> Vec<AdviceEntry>
where
    I: IntoIterator<Item = (S, f64)>,
    S: Into<String>,
{
    let mut entries: Vec<AdviceEntry> = leaves
        .into_iter()
        .map(|(leaf, resource)| AdviceEntry { leaf: leaf.into(), resource, share: 0.0 })
        .collect();
    let total: f64 = entries.iter().map(|e| e.resource).sum();
    for e in &mut entries {
        e.share = if total > 0.0 { e.resource / total } else { 0.0 };
    }
    entries.sort_by(|a, b| {
        b.resource.partial_cmp(&a.resource).unwrap_or(Ordering::Equal).then_with(|| a.leaf.cmp(&b.leaf))
    });
    entries
}
