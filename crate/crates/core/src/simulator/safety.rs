use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::layout::ZoneId;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SafetyReport {
    /// Distinct episodes of two vehicles inside the same conflict zone.
    pub co_occupancy_events: usize,
    /// Commits that left overlapping reservations in the table.
    pub table_overlaps: usize,
    /// Co-occupied (zone, step) samples, for diagnostics.
    pub co_occupied_samples: usize,
}

/// Tracks zone occupancy step by step. An episode starts when a pair of
/// vehicles is first seen together in a zone.
#[derive(Debug, Clone, Default)]
pub struct SafetyChecker {
    pub report: SafetyReport,
    active: BTreeSet<(ZoneId, u64, u64)>,
}

impl SafetyChecker {
    pub fn new() -> Self {
        Self::default()
    }

    /// `occupants` lists `(zone, vehicle)` pairs for the current step.
    pub fn observe(&mut self, mut occupants: Vec<(ZoneId, u64)>) -> Vec<(ZoneId, u64, u64)> {
        occupants.sort_unstable();
        let mut now = BTreeSet::new();
        for (i, &(z, a)) in occupants.iter().enumerate() {
            for &(z2, b) in &occupants[i + 1..] {
                if z2 != z {
                    break;
                }
                now.insert((z, a, b));
            }
        }
        self.report.co_occupied_samples += now.len();
        let fresh: Vec<_> = now.difference(&self.active).copied().collect();
        self.report.co_occupancy_events += fresh.len();
        self.active = now;
        fresh
    }

    pub fn record_table_overlap(&mut self) {
        self.report.table_overlaps += 1;
    }
}

/// Whether a body spanning `[front - length, front]` is inside the zone
/// interval `[entry, exit]`, with tolerance `tol`.
pub fn occupies(front: f64, length: f64, entry: f64, exit: f64, tol: f64) -> bool {
    front > entry + tol && front - length < exit - tol
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_episodes_once() {
        let mut c = SafetyChecker::new();
        let z = ZoneId(1);
        assert!(c.observe(vec![(z, 1)]).is_empty());
        assert_eq!(c.observe(vec![(z, 2), (z, 1)]).len(), 1);
        assert!(c.observe(vec![(z, 1), (z, 2)]).is_empty());
        c.observe(vec![]);
        c.observe(vec![(z, 1), (z, 2), (ZoneId(2), 3)]);
        assert_eq!(c.report.co_occupancy_events, 2);
        assert_eq!(c.report.co_occupied_samples, 3);
    }

    #[test]
    fn occupancy_tolerance() {
        assert!(!occupies(10.0005, 5.0, 10.0, 20.0, 1e-3));
        assert!(occupies(10.01, 5.0, 10.0, 20.0, 1e-3));
        assert!(!occupies(25.0, 5.0, 10.0, 20.0, 1e-3));
        assert!(occupies(24.99, 5.0, 10.0, 20.0, 1e-3));
    }
}
